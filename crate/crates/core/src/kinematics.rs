//! Forward kinematics over link chains.
//!
//! Frame convention: the base link frame is the mount pose. The frame of link
//! i (> 0) is `parent_frame ∘ joint.origin ∘ motion(q_i)`, where motion is a
//! rotation about (revolute) or translation along (prismatic) the joint axis.
//! Geometry is placed at `frame ∘ link.origin`.

use crate::error::{Error, Result};
use crate::math::{vscale, Pose, Quat};
use crate::morphology::{JointKind, Morphology};

/// World poses from one FK pass.
#[derive(Debug, Clone)]
pub struct FkResult {
    /// Link frames (joint frames after motion).
    pub frames: Vec<Pose>,
    /// Geometry poses: frame ∘ link origin.
    pub geometry: Vec<Pose>,
    /// Geometry pose of the first EE link.
    pub ee_pose: Pose,
}

fn joint_motion(kind: JointKind, axis: [f64; 3], q: f64) -> Pose {
    match kind {
        JointKind::Revolute => Pose::new([0.0; 3], Quat::from_axis_angle(axis, q)),
        JointKind::Prismatic => Pose::new(vscale(axis, q), Quat::IDENTITY),
        JointKind::Fixed => Pose::IDENTITY,
    }
}

/// Compute world poses for every link. Joint values are clamped to limits.
pub fn forward_kinematics(m: &Morphology, q: &[f64], mount: &Pose) -> Result<FkResult> {
    if q.len() != m.n_joints() {
        return Err(Error::Shape(format!(
            "expected {} joint values, got {}",
            m.n_joints(),
            q.len()
        )));
    }

    let n = m.n_links();
    let mut frames = Vec::with_capacity(n);
    let mut geometry = Vec::with_capacity(n);

    for (i, link) in m.links.iter().enumerate() {
        let frame = if i == 0 {
            *mount
        } else {
            let parent: Pose = frames[link.parent as usize];
            let joint = &m.joints[i - 1];
            let qi = q[i - 1].clamp(joint.lower, joint.upper);
            let origin = Pose::new(joint.origin_pos, joint.origin_quat);
            parent
                .compose(&origin)
                .compose(&joint_motion(joint.kind, joint.axis, qi))
        };
        geometry.push(frame.compose(&Pose::new(link.origin_pos, link.origin_quat)));
        frames.push(frame);
    }

    let ee_idx = m
        .ee_index()
        .ok_or_else(|| Error::Validation("no end-effector link".into()))?;
    let ee_pose = geometry[ee_idx];

    Ok(FkResult {
        frames,
        geometry,
        ee_pose,
    })
}

/// World EE position at configuration `q`.
pub fn ee_position(m: &Morphology, q: &[f64], mount: &Pose) -> Result<[f64; 3]> {
    Ok(forward_kinematics(m, q, mount)?.ee_pose.pos)
}
