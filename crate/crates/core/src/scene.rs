//! Scene construction and scene-level collision queries.
//!
//! A scene is a table (top surface at z = 0), an optional set of box
//! obstacles, and the robot mount pose. The push block is dynamic state and
//! is passed into queries separately.

use crate::collision::{pair_collision, BodyId, Contact};
use crate::error::Result;
use crate::kinematics::forward_kinematics;
use crate::math::{vnorm, Pose};
use crate::morphology::{GeometryPrimitive, JointKind, Morphology};
use crate::util::seed_stream;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub geom: GeometryPrimitive,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub mount: Pose,
    pub table: SceneObject,
    pub obstacles: Vec<SceneObject>,
}

/// Loose upper bound on how far any robot point can get from the mount.
pub fn reach_upper_bound(m: &Morphology) -> f64 {
    let mut total = 0.0;
    for j in &m.joints {
        total += vnorm(j.origin_pos);
        if j.kind == JointKind::Prismatic {
            total += j.lower.abs().max(j.upper.abs());
        }
    }
    let link_extent = m
        .links
        .iter()
        .map(|l| vnorm(l.origin_pos) + vnorm(l.geometry.params))
        .fold(0.0f64, f64::max);
    total + link_extent
}

impl Scene {
    /// Build the scene for a morphology. Obstacle placement is deterministic
    /// per (morphology, seed) and avoids the home configuration and the push
    /// block spawn strip.
    pub fn build(m: &Morphology, with_obstacles: bool, seed: u64) -> Result<Scene> {
        let table = SceneObject {
            geom: GeometryPrimitive::boxed(0.6, 0.6, 0.025),
            pose: Pose::from_pos([0.0, 0.0, -0.025]),
        };
        let mut scene = Scene {
            mount: Pose::IDENTITY,
            table,
            obstacles: Vec::new(),
        };
        if !with_obstacles {
            return Ok(scene);
        }

        let reach = reach_upper_bound(m).max(0.3);
        let radius = 0.55 * reach;
        let geom = GeometryPrimitive::boxed(0.04, 0.04, 0.08);
        let mut rng = seed_stream(seed, &[m.stable_hash(), 0x0b57]);
        let home = m.home_config();

        // Golden-angle sweep until the home pose is collision free and the
        // obstacle stays clear of the block spawn strip around x=0, y<0.
        let base_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for k in 0..64 {
            let angle = base_angle + k as f64 * 2.399963229728653;
            let pos = [radius * angle.cos(), radius * angle.sin(), 0.08];
            if pos[1] < -0.05 && pos[0].abs() < 0.15 {
                continue; // block spawn strip
            }
            let candidate = SceneObject {
                geom,
                pose: Pose::from_pos(pos),
            };
            scene.obstacles = vec![candidate];
            let contacts = scene_collisions(m, &home, &scene, None)?;
            if contacts.is_empty() {
                return Ok(scene);
            }
        }
        scene.obstacles.clear();
        Ok(scene)
    }
}

/// Dynamic block state for push scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub geom: GeometryPrimitive,
    pub pose: Pose,
}

/// All contacts for configuration `q`: robot x {table, obstacles, block} and
/// robot self-pairs excluding parent-child adjacency. The base link is
/// exempt from table contact (it is mounted there).
pub fn scene_collisions(
    m: &Morphology,
    q: &[f64],
    scene: &Scene,
    block: Option<&BlockState>,
) -> Result<Vec<Contact>> {
    let fk = forward_kinematics(m, q, &scene.mount)?;
    let mut contacts = Vec::new();

    for (i, link) in m.links.iter().enumerate() {
        let pose = &fk.geometry[i];
        if i != 0 {
            if let Some(c) = pair_collision(&link.geometry, pose, &scene.table.geom, &scene.table.pose)
            {
                contacts.push(Contact {
                    a_id: BodyId::Link(i),
                    b_id: BodyId::Table,
                    mtv: c.mtv,
                    depth: c.depth,
                });
            }
        }
        for (k, obs) in scene.obstacles.iter().enumerate() {
            if let Some(c) = pair_collision(&link.geometry, pose, &obs.geom, &obs.pose) {
                contacts.push(Contact {
                    a_id: BodyId::Link(i),
                    b_id: BodyId::Obstacle(k),
                    mtv: c.mtv,
                    depth: c.depth,
                });
            }
        }
        if let Some(b) = block {
            if let Some(c) = pair_collision(&link.geometry, pose, &b.geom, &b.pose) {
                contacts.push(Contact {
                    a_id: BodyId::Link(i),
                    b_id: BodyId::Block,
                    mtv: c.mtv,
                    depth: c.depth,
                });
            }
        }
    }

    // Self collisions, skipping parent-child pairs.
    for i in 0..m.links.len() {
        for j in (i + 1)..m.links.len() {
            if m.links[j].parent == i as i64 {
                continue;
            }
            if let Some(c) = pair_collision(
                &m.links[i].geometry,
                &fk.geometry[i],
                &m.links[j].geometry,
                &fk.geometry[j],
            ) {
                contacts.push(Contact {
                    a_id: BodyId::Link(i),
                    b_id: BodyId::Link(j),
                    mtv: c.mtv,
                    depth: c.depth,
                });
            }
        }
    }

    Ok(contacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use crate::morphology::{JointSpec, Link};

    fn planar_arm() -> Morphology {
        Morphology {
            name: "planar".into(),
            category: "test".into(),
            links: vec![
                Link {
                    index: 0,
                    parent: -1,
                    geometry: GeometryPrimitive::boxed(0.03, 0.03, 0.03),
                    origin_pos: [0.0, 0.0, 0.031],
                    origin_quat: Quat::IDENTITY,
                    is_ee: false,
                },
                Link {
                    index: 1,
                    parent: 0,
                    geometry: GeometryPrimitive::boxed(0.1, 0.02, 0.02),
                    origin_pos: [0.1, 0.0, 0.0],
                    origin_quat: Quat::IDENTITY,
                    is_ee: true,
                },
            ],
            joints: vec![JointSpec::revolute(
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 0.08],
                -3.0,
                3.0,
            )],
        }
    }

    #[test]
    fn arm_above_empty_table_is_collision_free() {
        let m = planar_arm();
        let scene = Scene::build(&m, false, 0).unwrap();
        let contacts = scene_collisions(&m, &[0.0], &scene, None).unwrap();
        assert!(contacts.is_empty(), "{contacts:?}");
    }

    #[test]
    fn arm_driven_below_table_hits_it() {
        let m = planar_arm();
        let scene = Scene::build(&m, false, 0).unwrap();
        // Rotate the link down about +y so it dives below z = 0.
        let contacts = scene_collisions(&m, &[1.5], &scene, None).unwrap();
        assert!(contacts
            .iter()
            .any(|c| c.a_id == BodyId::Link(1) && c.b_id == BodyId::Table));
    }

    #[test]
    fn adjacent_links_touching_are_exempt() {
        // Link 1 geometry starts right at the base box; parent-child overlap
        // must not be reported.
        let mut m = planar_arm();
        m.links[1].origin_pos = [0.05, 0.0, 0.0];
        let scene = Scene::build(&m, false, 0).unwrap();
        let contacts = scene_collisions(&m, &[0.0], &scene, None).unwrap();
        assert!(contacts
            .iter()
            .all(|c| !(matches!(c.a_id, BodyId::Link(_)) && matches!(c.b_id, BodyId::Link(_)))));
    }

    #[test]
    fn obstacle_scene_is_home_safe_and_deterministic() {
        let m = planar_arm();
        let s1 = Scene::build(&m, true, 9).unwrap();
        let s2 = Scene::build(&m, true, 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.obstacles.len(), 1);
        assert!(scene_collisions(&m, &m.home_config(), &s1, None)
            .unwrap()
            .is_empty());
    }
}
