//! Primitive-pair collision queries with minimal translation vectors.
//!
//! Sphere-sphere and sphere-box are analytic; box-box uses the separating
//! axis test on oriented boxes. Cylinders are replaced by their tight
//! oriented bounding boxes (half-extents (r, r, half_height), axis = local z).
//!
//! The returned `mtv` is the minimal translation that separates shape B from
//! shape A; `depth = |mtv|` and contacts are only reported for depth > 0.

use crate::math::{vadd, vcross, vdot, vnorm, vscale, vsub, Pose, Vec3};
use crate::morphology::{GeomKind, GeometryPrimitive};
use serde::{Deserialize, Serialize};

/// Body identifiers used by scene-level queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyId {
    Link(usize),
    Table,
    Obstacle(usize),
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub a_id: BodyId,
    pub b_id: BodyId,
    /// Minimal translation separating B from A.
    pub mtv: Vec3,
    pub depth: f64,
}

/// Contacts shallower than this are treated as touching, not overlapping.
const CONTACT_EPS: f64 = 1e-12;

/// Raw pair result before body ids are attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairContact {
    pub mtv: Vec3,
    pub depth: f64,
}

fn rotation_cols(pose: &Pose) -> [Vec3; 3] {
    let m = pose.quat.to_matrix();
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

fn project_radius(half: Vec3, cols: &[Vec3; 3], axis: Vec3) -> f64 {
    half[0] * vdot(cols[0], axis).abs()
        + half[1] * vdot(cols[1], axis).abs()
        + half[2] * vdot(cols[2], axis).abs()
}

fn obb_vs_obb(half_a: Vec3, pa: &Pose, half_b: Vec3, pb: &Pose) -> Option<PairContact> {
    let cols_a = rotation_cols(pa);
    let cols_b = rotation_cols(pb);
    let t = vsub(pb.pos, pa.pos);

    let mut best_overlap = f64::INFINITY;
    let mut best_axis = [1.0, 0.0, 0.0];

    let mut test_axis = |axis: Vec3| -> bool {
        let n = vnorm(axis);
        if n < 1e-9 {
            return true; // degenerate cross product, skip
        }
        let axis = vscale(axis, 1.0 / n);
        let ra = project_radius(half_a, &cols_a, axis);
        let rb = project_radius(half_b, &cols_b, axis);
        let dist = vdot(t, axis).abs();
        let overlap = ra + rb - dist;
        if overlap <= CONTACT_EPS {
            return false; // separating axis found
        }
        if overlap < best_overlap {
            best_overlap = overlap;
            best_axis = axis;
        }
        true
    };

    for axis in cols_a {
        if !test_axis(axis) {
            return None;
        }
    }
    for axis in cols_b {
        if !test_axis(axis) {
            return None;
        }
    }
    for a in cols_a {
        for b in cols_b {
            if !test_axis(vcross(a, b)) {
                return None;
            }
        }
    }

    // Push B away from A along the least-penetration axis.
    let sign = if vdot(t, best_axis) >= 0.0 { 1.0 } else { -1.0 };
    Some(PairContact {
        mtv: vscale(best_axis, sign * best_overlap),
        depth: best_overlap,
    })
}

fn sphere_vs_sphere(ra: f64, ca: Vec3, rb: f64, cb: Vec3) -> Option<PairContact> {
    let d = vsub(cb, ca);
    let dist = vnorm(d);
    let depth = ra + rb - dist;
    if depth <= CONTACT_EPS {
        return None;
    }
    let dir = if dist > 1e-12 {
        vscale(d, 1.0 / dist)
    } else {
        [1.0, 0.0, 0.0]
    };
    Some(PairContact {
        mtv: vscale(dir, depth),
        depth,
    })
}

/// Contact pushing the sphere away from the box.
fn sphere_vs_obb(r: f64, center: Vec3, half: Vec3, pose: &Pose) -> Option<PairContact> {
    let cols = rotation_cols(pose);
    let rel = vsub(center, pose.pos);
    let local = [vdot(rel, cols[0]), vdot(rel, cols[1]), vdot(rel, cols[2])];
    let clamped = [
        local[0].clamp(-half[0], half[0]),
        local[1].clamp(-half[1], half[1]),
        local[2].clamp(-half[2], half[2]),
    ];

    let inside = local == clamped;
    if !inside {
        let delta = vsub(local, clamped);
        let dist = vnorm(delta);
        let depth = r - dist;
        if depth <= CONTACT_EPS {
            return None;
        }
        let dir_local = vscale(delta, 1.0 / dist);
        let dir = vadd(
            vadd(vscale(cols[0], dir_local[0]), vscale(cols[1], dir_local[1])),
            vscale(cols[2], dir_local[2]),
        );
        return Some(PairContact {
            mtv: vscale(dir, depth),
            depth,
        });
    }

    // Center inside the box: exit through the nearest face.
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for i in 0..3 {
        let gap = half[i] - local[i].abs();
        if gap < best_gap {
            best_gap = gap;
            best = i;
        }
    }
    let sign = if local[best] >= 0.0 { 1.0 } else { -1.0 };
    let depth = r + best_gap;
    Some(PairContact {
        mtv: vscale(cols[best], sign * depth),
        depth,
    })
}

/// Tight OBB half-extents for a primitive treated as a box.
fn box_half(geom: &GeometryPrimitive) -> Vec3 {
    // Boxes store half-extents directly; cylinder params (r, r, hh) are
    // already the tight OBB half-extents about the local z axis.
    geom.params
}

/// Collision query between two posed primitives.
pub fn pair_collision(
    a: &GeometryPrimitive,
    pose_a: &Pose,
    b: &GeometryPrimitive,
    pose_b: &Pose,
) -> Option<PairContact> {
    match (a.kind, b.kind) {
        (GeomKind::Sphere, GeomKind::Sphere) => {
            sphere_vs_sphere(a.params[0], pose_a.pos, b.params[0], pose_b.pos)
        }
        (GeomKind::Sphere, _) => {
            // mtv from sphere_vs_obb pushes the sphere (A); negate for B.
            sphere_vs_obb(a.params[0], pose_a.pos, box_half(b), pose_b).map(|c| PairContact {
                mtv: vscale(c.mtv, -1.0),
                depth: c.depth,
            })
        }
        (_, GeomKind::Sphere) => sphere_vs_obb(b.params[0], pose_b.pos, box_half(a), pose_a),
        _ => obb_vs_obb(box_half(a), pose_a, box_half(b), pose_b),
    }
}
