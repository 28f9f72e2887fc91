//! 48-dimensional link tokens and morphology vectors.
//!
//! Slot layout (fixed; sizes follow the link-state table, positions are this
//! crate's convention):
//!
//! ```text
//! [ 0]      link index / MAX_LINKS
//! [ 1]      parent index / MAX_LINKS (base: -1 / MAX_LINKS)
//! [ 2.. 6]  EE flag, repeated 4x
//! [ 6.. 9]  geometry one-hot [box, sphere, cylinder]
//! [ 9..12]  geometry params
//! [12..15]  link origin position
//! [15..19]  link origin quaternion (w, x, y, z)
//! [19..22]  joint axis
//! [22..25]  joint origin position
//! [25..29]  joint origin quaternion
//! [29..32]  joint type one-hot [prismatic, revolute, fixed]
//! [32..48]  sinusoidal joint value: [sin(2^k q~), cos(2^k q~)] for k = 0..7
//! ```
//!
//! `q~` maps [lower, upper] affinely onto [-pi, pi]; fixed joints (and the
//! base link) encode `q~ = 0`. Environment objects reuse the same layout with
//! both index slots set to the sentinel 1.0 and all joint slots zero; the
//! reach goal token carries the goal position in the link-origin slot with
//! all-ones EE flags.

use crate::error::{Error, Result};
use crate::math::{Pose, Vec3};
use crate::morphology::{GeomKind, GeometryPrimitive, JointKind, Morphology, MAX_LINKS};
use std::f64::consts::PI;

pub const TOKEN_DIM: usize = 48;

pub const SLOT_LINK_INDEX: usize = 0;
pub const SLOT_PARENT_INDEX: usize = 1;
pub const SLOT_EE_FLAG: std::ops::Range<usize> = 2..6;
pub const SLOT_GEOM_ONEHOT: std::ops::Range<usize> = 6..9;
pub const SLOT_GEOM_PARAMS: std::ops::Range<usize> = 9..12;
pub const SLOT_LINK_ORIGIN_POS: std::ops::Range<usize> = 12..15;
pub const SLOT_LINK_ORIGIN_QUAT: std::ops::Range<usize> = 15..19;
pub const SLOT_JOINT_AXIS: std::ops::Range<usize> = 19..22;
pub const SLOT_JOINT_ORIGIN_POS: std::ops::Range<usize> = 22..25;
pub const SLOT_JOINT_ORIGIN_QUAT: std::ops::Range<usize> = 25..29;
pub const SLOT_JOINT_ONEHOT: std::ops::Range<usize> = 29..32;
pub const SLOT_Q_SINUSOIDAL: std::ops::Range<usize> = 32..48;

pub type LinkToken = [f64; TOKEN_DIM];

fn geom_onehot(kind: GeomKind) -> [f64; 3] {
    match kind {
        GeomKind::Box => [1.0, 0.0, 0.0],
        GeomKind::Sphere => [0.0, 1.0, 0.0],
        GeomKind::Cylinder => [0.0, 0.0, 1.0],
    }
}

fn joint_onehot(kind: JointKind) -> [f64; 3] {
    match kind {
        JointKind::Prismatic => [1.0, 0.0, 0.0],
        JointKind::Revolute => [0.0, 1.0, 0.0],
        JointKind::Fixed => [0.0, 0.0, 1.0],
    }
}

/// Normalize a joint value into the sinusoidal base angle.
fn normalized_q(kind: JointKind, lower: f64, upper: f64, q: f64) -> f64 {
    if kind == JointKind::Fixed || upper <= lower {
        return 0.0;
    }
    let q = q.clamp(lower, upper);
    // Affine [lower, upper] -> [-pi, pi].
    (q - lower) / (upper - lower) * (2.0 * PI) - PI
}

fn write_sinusoidal(token: &mut LinkToken, q_tilde: f64) {
    for k in 0..8 {
        let w = (1u32 << k) as f64;
        token[SLOT_Q_SINUSOIDAL.start + 2 * k] = (w * q_tilde).sin();
        token[SLOT_Q_SINUSOIDAL.start + 2 * k + 1] = (w * q_tilde).cos();
    }
}

fn write_geometry(token: &mut LinkToken, geom: &GeometryPrimitive) {
    token[SLOT_GEOM_ONEHOT].copy_from_slice(&geom_onehot(geom.kind));
    token[SLOT_GEOM_PARAMS].copy_from_slice(&geom.params);
}

/// Encode one link at joint value `q` (ignored for the base link; clamped to
/// the joint limits otherwise).
pub fn encode_link_token(m: &Morphology, link_idx: usize, q: f64) -> Result<LinkToken> {
    let link = m
        .links
        .get(link_idx)
        .ok_or_else(|| Error::Shape(format!("link index {} out of range", link_idx)))?;

    let mut token = [0.0; TOKEN_DIM];
    token[SLOT_LINK_INDEX] = link.index as f64 / MAX_LINKS as f64;
    token[SLOT_PARENT_INDEX] = link.parent as f64 / MAX_LINKS as f64;
    let ee = if link.is_ee { 1.0 } else { 0.0 };
    for s in SLOT_EE_FLAG {
        token[s] = ee;
    }
    write_geometry(&mut token, &link.geometry);
    token[SLOT_LINK_ORIGIN_POS].copy_from_slice(&link.origin_pos);
    token[SLOT_LINK_ORIGIN_QUAT].copy_from_slice(&link.origin_quat.canonical().as_array());

    match m.joint_of(link_idx) {
        Some(joint) => {
            token[SLOT_JOINT_AXIS].copy_from_slice(&joint.axis);
            token[SLOT_JOINT_ORIGIN_POS].copy_from_slice(&joint.origin_pos);
            token[SLOT_JOINT_ORIGIN_QUAT].copy_from_slice(&joint.origin_quat.canonical().as_array());
            token[SLOT_JOINT_ONEHOT].copy_from_slice(&joint_onehot(joint.kind));
            write_sinusoidal(&mut token, normalized_q(joint.kind, joint.lower, joint.upper, q));
        }
        None => {
            // Base link: joint descriptor slots stay zero, q~ = 0.
            write_sinusoidal(&mut token, 0.0);
        }
    }
    Ok(token)
}

/// Token for an environment object (block, obstacle) at a world pose.
pub fn object_token(geom: &GeometryPrimitive, pose: &Pose) -> LinkToken {
    let mut token = [0.0; TOKEN_DIM];
    token[SLOT_LINK_INDEX] = 1.0;
    token[SLOT_PARENT_INDEX] = 1.0;
    write_geometry(&mut token, geom);
    token[SLOT_LINK_ORIGIN_POS].copy_from_slice(&pose.pos);
    token[SLOT_LINK_ORIGIN_QUAT].copy_from_slice(&pose.quat.canonical().as_array());
    token
}

/// Goal token for reach: all-ones EE flags, goal position in the link-origin
/// position slot, everything else zero.
pub fn goal_token(goal: Vec3) -> LinkToken {
    let mut token = [0.0; TOKEN_DIM];
    for s in SLOT_EE_FLAG {
        token[s] = 1.0;
    }
    token[SLOT_LINK_ORIGIN_POS].copy_from_slice(&goal);
    token
}

/// Flattened home-configuration tokens, zero-padded to MAX_LINKS * 48.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyVector {
    pub values: Vec<f64>,
}

pub fn morphology_vector(m: &Morphology) -> Result<MorphologyVector> {
    let report = crate::morphology::validate_morphology(m);
    if !report.ok() {
        return Err(Error::Validation(report.to_string()));
    }
    let home = m.home_config();
    let mut values = vec![0.0; MAX_LINKS * TOKEN_DIM];
    for (i, _) in m.links.iter().enumerate() {
        let q = if i == 0 { 0.0 } else { home[i - 1] };
        let token = encode_link_token(m, i, q)?;
        values[i * TOKEN_DIM..(i + 1) * TOKEN_DIM].copy_from_slice(&token);
    }
    Ok(MorphologyVector { values })
}

/// Cosine similarity of two morphology vectors.
pub fn cosine_similarity(a: &MorphologyVector, b: &MorphologyVector) -> Result<f64> {
    let na: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Shape("cosine similarity of zero-norm vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{JointSpec, Link};
    use crate::math::Quat;

    fn chain3() -> Morphology {
        Morphology {
            name: "chain3".into(),
            category: "test".into(),
            links: vec![
                Link {
                    index: 0,
                    parent: -1,
                    geometry: GeometryPrimitive::boxed(0.05, 0.05, 0.05),
                    origin_pos: [0.0; 3],
                    origin_quat: Quat::IDENTITY,
                    is_ee: false,
                },
                Link {
                    index: 1,
                    parent: 0,
                    geometry: GeometryPrimitive::boxed(0.1, 0.02, 0.02),
                    origin_pos: [0.1, 0.0, 0.0],
                    origin_quat: Quat::IDENTITY,
                    is_ee: false,
                },
                Link {
                    index: 2,
                    parent: 1,
                    geometry: GeometryPrimitive::sphere(0.03),
                    origin_pos: [0.0; 3],
                    origin_quat: Quat::IDENTITY,
                    is_ee: true,
                },
            ],
            joints: vec![
                JointSpec::revolute([0.0, 0.0, 1.0], [0.0, 0.0, 0.05], -2.0, 2.0),
                JointSpec::fixed([0.2, 0.0, 0.0], Quat::IDENTITY),
            ],
        }
    }

    #[test]
    fn base_link_token_convention() {
        let m = chain3();
        let t = encode_link_token(&m, 0, 0.0).unwrap();
        assert_eq!(t[SLOT_PARENT_INDEX], -1.0 / MAX_LINKS as f64);
        assert!(t[SLOT_JOINT_ONEHOT].iter().all(|&v| v == 0.0));
        assert!(t[SLOT_JOINT_AXIS].iter().all(|&v| v == 0.0));
        for k in 0..8 {
            assert_eq!(t[SLOT_Q_SINUSOIDAL.start + 2 * k], 0.0);
            assert_eq!(t[SLOT_Q_SINUSOIDAL.start + 2 * k + 1], 1.0);
        }
    }

    #[test]
    fn midpoint_q_maps_to_zero_angle() {
        let m = chain3();
        // Joint 0 limits are [-2, 2]; midpoint 0 maps to q~ = 0.
        let t = encode_link_token(&m, 1, 0.0).unwrap();
        for k in 0..8 {
            assert!((t[SLOT_Q_SINUSOIDAL.start + 2 * k]).abs() < 1e-12);
            assert!((t[SLOT_Q_SINUSOIDAL.start + 2 * k + 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_joint_onehot_and_flat_encoding() {
        let m = chain3();
        let t = encode_link_token(&m, 2, 0.0).unwrap();
        assert_eq!(&t[SLOT_JOINT_ONEHOT], &[0.0, 0.0, 1.0]);
        assert_eq!(t[SLOT_Q_SINUSOIDAL.start], 0.0);
        assert_eq!(t[SLOT_Q_SINUSOIDAL.start + 1], 1.0);
    }

    #[test]
    fn limit_endpoints_map_to_pm_pi() {
        let m = chain3();
        let lo = encode_link_token(&m, 1, -2.0).unwrap();
        let hi = encode_link_token(&m, 1, 2.0).unwrap();
        // sin(-pi) ~ 0, cos(-pi) = -1 at k = 0.
        assert!(lo[SLOT_Q_SINUSOIDAL.start].abs() < 1e-9);
        assert!((lo[SLOT_Q_SINUSOIDAL.start + 1] + 1.0).abs() < 1e-12);
        assert!((hi[SLOT_Q_SINUSOIDAL.start + 1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_pairs_are_unit_circle() {
        let m = chain3();
        for q in [-2.0, -0.7, 0.0, 0.31, 1.9] {
            let t = encode_link_token(&m, 1, q).unwrap();
            for k in 0..8 {
                let s = t[SLOT_Q_SINUSOIDAL.start + 2 * k];
                let c = t[SLOT_Q_SINUSOIDAL.start + 2 * k + 1];
                assert!((s * s + c * c - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn morphology_vector_padding_and_determinism() {
        let m = chain3();
        let v1 = morphology_vector(&m).unwrap();
        let v2 = morphology_vector(&m).unwrap();
        assert_eq!(v1, v2);
        assert!(v1.values[3 * TOKEN_DIM..].iter().all(|&x| x == 0.0));
        assert_eq!(v1.values.len(), MAX_LINKS * TOKEN_DIM);
    }

    #[test]
    fn single_length_change_touches_only_geom_params() {
        let m = chain3();
        let mut m2 = m.clone();
        m2.links[1].geometry.params[0] = 0.15;
        let a = morphology_vector(&m).unwrap();
        let b = morphology_vector(&m2).unwrap();
        let diff: Vec<usize> = (0..a.values.len())
            .filter(|&i| a.values[i] != b.values[i])
            .collect();
        let expect = TOKEN_DIM + SLOT_GEOM_PARAMS.start;
        assert_eq!(diff, vec![expect]);
    }

    #[test]
    fn cosine_identity_orthogonal_and_negation() {
        let m = chain3();
        let v = morphology_vector(&m).unwrap();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);

        let mut e1 = MorphologyVector { values: vec![0.0; MAX_LINKS * TOKEN_DIM] };
        let mut e2 = e1.clone();
        e1.values[0] = 1.0;
        e2.values[1] = 1.0;
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);

        let neg = MorphologyVector { values: v.values.iter().map(|x| -x).collect() };
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = MorphologyVector { values: vec![0.0; MAX_LINKS * TOKEN_DIM] };
        assert!(cosine_similarity(&z, &z).is_err());
    }

    #[test]
    fn cosine_scale_invariance() {
        let m = chain3();
        let v = morphology_vector(&m).unwrap();
        let mut m2 = chain3();
        m2.links[1].geometry.params[1] = 0.04;
        let w = morphology_vector(&m2).unwrap();
        let scaled = MorphologyVector { values: w.values.iter().map(|x| 3.7 * x).collect() };
        let c1 = cosine_similarity(&v, &w).unwrap();
        let c2 = cosine_similarity(&v, &scaled).unwrap();
        assert!((c1 - c2).abs() < 1e-12);
    }
}
