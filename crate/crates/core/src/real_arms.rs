//! Hand-authored primitive-link approximations of real robot arms.
//!
//! These match published DOF counts and rough segment dimensions only; link
//! geometry is reduced to boxes/cylinders/spheres the same way artificial
//! robots are described. Axis patterns and frame conventions intentionally
//! vary between vendors, as they do in the original models.

use crate::error::Result;
use crate::math::{Quat, Vec3};
use crate::morphology::{GeometryPrimitive, JointKind, JointSpec, Link, Morphology};
use crate::procgen::PLANE_Z;

struct Seg {
    axis: Vec3,
    origin: Vec3,
    origin_quat: Quat,
    geom: GeometryPrimitive,
    geom_origin: Vec3,
    geom_quat: Quat,
    limits: (f64, f64),
}

impl Seg {
    fn new(axis: Vec3, origin: Vec3, geom: GeometryPrimitive, geom_origin: Vec3) -> Self {
        Seg {
            axis,
            origin,
            origin_quat: Quat::IDENTITY,
            geom,
            geom_origin,
            geom_quat: Quat::IDENTITY,
            limits: (-2.9, 2.9),
        }
    }

    fn quat(mut self, q: Quat) -> Self {
        self.origin_quat = q;
        self
    }

    fn geom_quat(mut self, q: Quat) -> Self {
        self.geom_quat = q;
        self
    }

    fn limits(mut self, lower: f64, upper: f64) -> Self {
        self.limits = (lower, upper);
        self
    }
}

fn build(name: &str, base: GeometryPrimitive, base_origin: Vec3, segs: Vec<Seg>, tip: Vec3) -> Morphology {
    let mut links = vec![Link {
        index: 0,
        parent: -1,
        geometry: base,
        origin_pos: base_origin,
        origin_quat: Quat::IDENTITY,
        is_ee: false,
    }];
    let mut joints = Vec::new();
    for (i, s) in segs.iter().enumerate() {
        joints.push(JointSpec {
            kind: JointKind::Revolute,
            axis: s.axis,
            origin_pos: s.origin,
            origin_quat: s.origin_quat.canonical(),
            lower: s.limits.0,
            upper: s.limits.1,
        });
        links.push(Link {
            index: i + 1,
            parent: i as i64,
            geometry: s.geom,
            origin_pos: s.geom_origin,
            origin_quat: s.geom_quat.canonical(),
            is_ee: false,
        });
    }
    let n = links.len();
    joints.push(JointSpec::fixed(tip, Quat::IDENTITY));
    links.push(Link {
        index: n,
        parent: (n - 1) as i64,
        geometry: GeometryPrimitive::boxed(0.01, 0.01, 0.01),
        origin_pos: [0.0; 3],
        origin_quat: Quat::IDENTITY,
        is_ee: true,
    });
    Morphology {
        name: name.into(),
        category: name.into(),
        links,
        joints,
    }
}

const Z: Vec3 = [0.0, 0.0, 1.0];
const Y: Vec3 = [0.0, 1.0, 0.0];

fn rot_x(angle: f64) -> Quat {
    Quat::from_axis_angle([1.0, 0.0, 0.0], angle)
}

fn slim_box(half_len: f64, half_w: f64) -> GeometryPrimitive {
    GeometryPrimitive::boxed(half_len, half_w, half_w)
}

fn lying_cyl(half_len: f64, r: f64) -> (GeometryPrimitive, Quat) {
    (
        GeometryPrimitive::cylinder(r, half_len),
        Quat::from_axis_angle([0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2),
    )
}

/// 6-DOF arm, UR5-like proportions (0.425 / 0.392 main segments).
pub fn ur5() -> Morphology {
    let (c1, q1) = lying_cyl(0.2125, 0.045);
    let (c2, q2) = lying_cyl(0.196, 0.038);
    build(
        "ur5",
        GeometryPrimitive::cylinder(0.075, 0.04),
        [0.0, 0.0, 0.041],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.089], GeometryPrimitive::cylinder(0.06, 0.05), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.06], c1, [0.2125, 0.0, 0.0]).geom_quat(q1).limits(-2.3, 2.3),
            Seg::new(Y, [0.425, 0.0, 0.0], c2, [0.196, 0.0, 0.0]).geom_quat(q2).limits(-2.6, 2.6),
            Seg::new(Y, [0.392, 0.0, 0.0], GeometryPrimitive::boxed(0.045, 0.03, 0.03), [0.045, 0.0, 0.0]),
            Seg::new(Z, [0.09, 0.0, 0.0], GeometryPrimitive::boxed(0.04, 0.028, 0.028), [0.04, 0.0, 0.0]),
            Seg::new(Y, [0.08, 0.0, 0.0], GeometryPrimitive::boxed(0.035, 0.025, 0.025), [0.035, 0.0, 0.0]),
        ],
        [0.07, 0.0, 0.0],
    )
}

/// 7-DOF arm, Panda-like proportions. Box links, alternating z/y axes.
pub fn panda() -> Morphology {
    build(
        "panda",
        GeometryPrimitive::boxed(0.09, 0.09, 0.03),
        [0.0, 0.0, 0.031],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.14], GeometryPrimitive::boxed(0.05, 0.05, 0.07), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.095], slim_box(0.158, 0.045), [0.158, 0.0, 0.0]).limits(-1.9, 1.9),
            Seg::new(Z, [0.316, 0.0, 0.0], GeometryPrimitive::boxed(0.041, 0.041, 0.041), [0.041, 0.0, 0.0]),
            Seg::new(Y, [0.083, 0.0, 0.0], slim_box(0.16, 0.04), [0.16, 0.0, 0.0]).limits(-2.6, 2.6),
            Seg::new(Z, [0.32, 0.0, 0.0], GeometryPrimitive::boxed(0.042, 0.035, 0.035), [0.042, 0.0, 0.0]),
            Seg::new(Y, [0.084, 0.0, 0.0], slim_box(0.044, 0.03), [0.044, 0.0, 0.0]).limits(-2.2, 2.2),
            Seg::new(Z, [0.088, 0.0, 0.0], GeometryPrimitive::boxed(0.035, 0.025, 0.025), [0.035, 0.0, 0.0]),
        ],
        [0.07, 0.0, 0.0],
    )
}

/// 7-DOF arm, Kinova-like: cylinder links, one rolled wrist frame.
pub fn kinova() -> Morphology {
    let half = std::f64::consts::FRAC_PI_2;
    let (c1, q1) = lying_cyl(0.14, 0.04);
    let (c2, q2) = lying_cyl(0.105, 0.035);
    let (conn, qc) = lying_cyl(0.04, 0.038);
    let (wrist, qw) = lying_cyl(0.03, 0.028);
    build(
        "kinova",
        GeometryPrimitive::cylinder(0.05, 0.04),
        [0.0, 0.0, 0.041],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.1564], GeometryPrimitive::cylinder(0.045, 0.06), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.07], c1, [0.14, 0.0, 0.0]).geom_quat(q1).limits(-2.2, 2.2),
            Seg::new(Y, [0.281, 0.0, 0.0], conn, [0.041, 0.0, 0.0]).geom_quat(qc),
            Seg::new(Y, [0.082, 0.0, 0.0], c2, [0.105, 0.0, 0.0]).geom_quat(q2).limits(-2.5, 2.5),
            Seg::new(Z, [0.211, 0.0, 0.0], wrist, [0.031, 0.0, 0.0]).quat(rot_x(half)).geom_quat(qw),
            Seg::new(Y, [0.062, 0.0, 0.0], GeometryPrimitive::cylinder(0.028, 0.03), [0.031, 0.0, 0.0]).geom_quat(qw).limits(-2.1, 2.1),
            Seg::new(Z, [0.062, 0.0, 0.0], GeometryPrimitive::cylinder(0.025, 0.025), [0.026, 0.0, 0.0]).geom_quat(qw),
        ],
        [0.052, 0.0, 0.0],
    )
}

/// 6-DOF arm, Jaco-like: slim boxes with sphere wrist links.
pub fn jaco() -> Morphology {
    build(
        "jaco",
        GeometryPrimitive::cylinder(0.045, 0.04),
        [0.0, 0.0, 0.041],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.1567], GeometryPrimitive::cylinder(0.04, 0.05), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.06], slim_box(0.205, 0.035), [0.205, 0.0, 0.0]).limits(-2.4, 2.4),
            Seg::new(Y, [0.41, 0.0, 0.0], slim_box(0.1035, 0.03), [0.1035, 0.0, 0.0]).limits(-2.7, 2.7),
            Seg::new(Y, [0.207, 0.0, 0.0], GeometryPrimitive::sphere(0.035), [0.035, 0.0, 0.0]),
            Seg::new(Z, [0.07, 0.0, 0.0], GeometryPrimitive::sphere(0.03), [0.03, 0.0, 0.0]),
            Seg::new(Y, [0.06, 0.0, 0.0], GeometryPrimitive::sphere(0.028), [0.028, 0.0, 0.0]),
        ],
        [0.056, 0.0, 0.0],
    )
}

/// 7-DOF arm, XArm-like proportions.
pub fn xarm() -> Morphology {
    build(
        "xarm",
        GeometryPrimitive::boxed(0.08, 0.08, 0.04),
        [0.0, 0.0, 0.041],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.267], GeometryPrimitive::cylinder(0.05, 0.06), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.065], slim_box(0.1465, 0.04), [0.1465, 0.0, 0.0]).limits(-2.1, 2.1),
            Seg::new(Y, [0.293, 0.0, 0.0], GeometryPrimitive::boxed(0.0385, 0.032, 0.032), [0.0385, 0.0, 0.0]),
            Seg::new(Y, [0.0775, 0.0, 0.0], slim_box(0.1715, 0.034), [0.1715, 0.0, 0.0]).limits(-2.6, 2.6),
            Seg::new(Z, [0.343, 0.0, 0.0], GeometryPrimitive::boxed(0.038, 0.028, 0.028), [0.038, 0.0, 0.0]),
            Seg::new(Y, [0.076, 0.0, 0.0], GeometryPrimitive::boxed(0.0485, 0.026, 0.026), [0.0485, 0.0, 0.0]),
            Seg::new(Z, [0.097, 0.0, 0.0], GeometryPrimitive::boxed(0.03, 0.022, 0.022), [0.03, 0.0, 0.0]),
        ],
        [0.06, 0.0, 0.0],
    )
}

/// 7-DOF arm, LWR/iiwa-like: long cylinders, one rolled elbow frame.
pub fn lwr() -> Morphology {
    let half = std::f64::consts::FRAC_PI_2;
    let (c1, q1) = lying_cyl(0.2, 0.05);
    let (c2, q2) = lying_cyl(0.195, 0.043);
    let (conn, qc) = lying_cyl(0.045, 0.042);
    build(
        "lwr",
        GeometryPrimitive::cylinder(0.07, 0.045),
        [0.0, 0.0, 0.046],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.1575], GeometryPrimitive::cylinder(0.055, 0.07), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.09], c1, [0.2, 0.0, 0.0]).geom_quat(q1).limits(-2.1, 2.1),
            Seg::new(Z, [0.401, 0.0, 0.0], conn, [0.046, 0.0, 0.0]).quat(rot_x(-half)).geom_quat(qc),
            Seg::new(Y, [0.092, 0.0, 0.0], c2, [0.196, 0.0, 0.0]).geom_quat(q2).limits(-2.1, 2.1),
            Seg::new(Z, [0.392, 0.0, 0.0], GeometryPrimitive::cylinder(0.04, 0.04), [0.041, 0.0, 0.0]).geom_quat(qc),
            Seg::new(Y, [0.082, 0.0, 0.0], GeometryPrimitive::cylinder(0.035, 0.035), [0.036, 0.0, 0.0]).geom_quat(q2).limits(-2.1, 2.1),
            Seg::new(Z, [0.072, 0.0, 0.0], GeometryPrimitive::cylinder(0.03, 0.03), [0.031, 0.0, 0.0]).geom_quat(q1),
        ],
        [0.062, 0.0, 0.0],
    )
}

/// 7-DOF compact arm, Yumi-like (single arm of the dual setup).
pub fn yumi() -> Morphology {
    build(
        "yumi",
        GeometryPrimitive::boxed(0.06, 0.06, 0.05),
        [0.0, 0.0, 0.051],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.11], GeometryPrimitive::boxed(0.04, 0.04, 0.05), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.07], slim_box(0.1255, 0.03), [0.1255, 0.0, 0.0]).limits(-2.5, 2.5),
            Seg::new(Z, [0.251, 0.0, 0.0], GeometryPrimitive::boxed(0.03, 0.03, 0.03), [0.03, 0.0, 0.0]),
            Seg::new(Y, [0.06, 0.0, 0.0], slim_box(0.1325, 0.028), [0.1325, 0.0, 0.0]).limits(-2.5, 2.5),
            Seg::new(Z, [0.265, 0.0, 0.0], GeometryPrimitive::boxed(0.028, 0.025, 0.025), [0.028, 0.0, 0.0]),
            Seg::new(Y, [0.056, 0.0, 0.0], GeometryPrimitive::boxed(0.035, 0.022, 0.022), [0.035, 0.0, 0.0]).limits(-2.4, 2.4),
            Seg::new(Z, [0.07, 0.0, 0.0], GeometryPrimitive::boxed(0.025, 0.02, 0.02), [0.025, 0.0, 0.0]),
        ],
        [0.05, 0.0, 0.0],
    )
}

/// 6-DOF hobby-scale arm, WidowX-like proportions.
pub fn widowx() -> Morphology {
    build(
        "widowx",
        GeometryPrimitive::boxed(0.05, 0.05, 0.02),
        [0.0, 0.0, 0.021],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.072], GeometryPrimitive::boxed(0.03, 0.03, 0.035), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.04], slim_box(0.125, 0.022), [0.125, 0.0, 0.0]).limits(-1.9, 1.9),
            Seg::new(Y, [0.25, 0.0, 0.0], slim_box(0.125, 0.02), [0.125, 0.0, 0.0]).limits(-2.1, 2.1),
            Seg::new(Y, [0.25, 0.0, 0.0], GeometryPrimitive::boxed(0.0325, 0.018, 0.018), [0.0325, 0.0, 0.0]).limits(-1.75, 1.75),
            Seg::new(Z, [0.065, 0.0, 0.0], GeometryPrimitive::boxed(0.021, 0.016, 0.016), [0.021, 0.0, 0.0]),
            Seg::new(Y, [0.042, 0.0, 0.0], GeometryPrimitive::boxed(0.018, 0.014, 0.014), [0.018, 0.0, 0.0]),
        ],
        [0.036, 0.0, 0.0],
    )
}

/// Generic 5-DOF arm kept deliberately plain.
pub fn arm5() -> Morphology {
    build(
        "arm5",
        GeometryPrimitive::boxed(0.05, 0.05, 0.025),
        [0.0, 0.0, 0.026],
        vec![
            Seg::new(Z, [0.0, 0.0, 0.08], GeometryPrimitive::cylinder(0.035, 0.04), [0.0, 0.0, 0.0]),
            Seg::new(Y, [0.0, 0.0, 0.05], slim_box(0.15, 0.028), [0.15, 0.0, 0.0]).limits(-2.3, 2.3),
            Seg::new(Y, [0.3, 0.0, 0.0], slim_box(0.125, 0.024), [0.125, 0.0, 0.0]).limits(-2.5, 2.5),
            Seg::new(Z, [0.25, 0.0, 0.0], GeometryPrimitive::boxed(0.03, 0.02, 0.02), [0.03, 0.0, 0.0]),
            Seg::new(Y, [0.06, 0.0, 0.0], GeometryPrimitive::boxed(0.025, 0.018, 0.018), [0.025, 0.0, 0.0]),
        ],
        [0.05, 0.0, 0.0],
    )
}

/// Planar 4-DOF stand-in used by splits that need a ur5-class arm working in
/// the tabletop plane (reach goals and push contact both live near z ~ 0.05).
pub fn ur5_planar_proxy() -> Morphology {
    let mut m = build(
        "ur5like",
        GeometryPrimitive::boxed(0.06, 0.06, 0.02),
        [0.0, 0.0, 0.021],
        vec![
            Seg::new(Z, [0.0, 0.0, PLANE_Z], slim_box(0.14, 0.03), [0.14, 0.0, 0.0]),
            Seg::new(Z, [0.28, 0.0, 0.0], slim_box(0.12, 0.026), [0.12, 0.0, 0.0]),
            Seg::new(Z, [0.24, 0.0, 0.0], slim_box(0.1, 0.024), [0.1, 0.0, 0.0]),
            Seg::new(Z, [0.2, 0.0, 0.0], GeometryPrimitive::boxed(0.03, 0.02, 0.02), [0.03, 0.0, 0.0]),
        ],
        [0.06, 0.0, 0.0],
    );
    m.name = "ur5like".into();
    m.category = "ur5like".into();
    m
}

/// All authored arms, in registry order.
pub fn all_authored() -> Vec<Morphology> {
    vec![
        ur5(),
        panda(),
        kinova(),
        jaco(),
        xarm(),
        lwr(),
        yumi(),
        widowx(),
        arm5(),
        ur5_planar_proxy(),
    ]
}

pub fn authored_by_name(name: &str) -> Result<Morphology> {
    all_authored()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| crate::error::Error::UnknownTask(name.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::validate_morphology;
    use crate::scene::{scene_collisions, Scene};

    #[test]
    fn authored_arms_validate_and_are_home_safe() {
        for m in all_authored() {
            let report = validate_morphology(&m);
            assert!(report.ok(), "{}: {}", m.name, report);
            let scene = Scene::build(&m, false, 0).unwrap();
            let contacts = scene_collisions(&m, &m.home_config(), &scene, None).unwrap();
            assert!(contacts.is_empty(), "{} home contacts: {:?}", m.name, contacts);
        }
    }

    #[test]
    fn dof_counts_match_the_published_arms() {
        let expect = [
            ("ur5", 6),
            ("panda", 7),
            ("kinova", 7),
            ("jaco", 6),
            ("xarm", 7),
            ("lwr", 7),
            ("yumi", 7),
            ("widowx", 6),
            ("arm5", 5),
        ];
        for (name, dof) in expect {
            let m = authored_by_name(name).unwrap();
            assert_eq!(m.n_movable(), dof, "{name}");
        }
    }

    #[test]
    fn goal_sampling_succeeds_for_every_arm() {
        for m in all_authored() {
            let scene = Scene::build(&m, false, 0).unwrap();
            let goals = crate::env::sample_reach_goals(&m, &scene, 5, 1).unwrap();
            assert_eq!(goals.len(), 5, "{}", m.name);
        }
    }
}
