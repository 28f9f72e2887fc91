//! Benchmark registry: train/test splits over generated and authored robots.
//!
//! Six tasks cover interpolation (arm3, panda), composition (ee_arm,
//! ee_task), and extrapolation (prims, arms). Generation is a pure function
//! of (task name, seed); description files regenerate byte-identically.

use crate::env::TaskKind;
use crate::error::{Error, Result};
use crate::morphology::{save_morphology, Morphology};
use crate::procgen::{
    attach_end_effector, gen_arm3, gen_primitive_category, random_scale_factors, scale_arm, EeKind,
    GenParams, PrimitiveKind,
};
use crate::real_arms;
use crate::token::{cosine_similarity, morphology_vector};
use crate::util::mix_seed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const SPLIT_NAMES: [&str; 6] = ["arm3", "panda", "ee_arm", "ee_task", "prims", "arms"];

#[derive(Debug, Clone)]
pub struct TaskEntry {
    pub morph: Morphology,
    pub task: TaskKind,
}

#[derive(Debug, Clone)]
pub struct BenchmarkTask {
    pub name: String,
    pub train: Vec<TaskEntry>,
    pub test: Vec<TaskEntry>,
    pub obstacles: bool,
}

impl BenchmarkTask {
    pub fn entries(&self, split: Split) -> &[TaskEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Override every entry's task kind (config-level switch).
    pub fn with_task_override(mut self, task: TaskKind) -> Self {
        for e in self.train.iter_mut().chain(self.test.iter_mut()) {
            e.task = task;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

fn reach(morph: Morphology) -> TaskEntry {
    TaskEntry {
        morph,
        task: TaskKind::Reach,
    }
}

fn push(morph: Morphology) -> TaskEntry {
    TaskEntry {
        morph,
        task: TaskKind::Push,
    }
}

fn build_arm3(seed: u64) -> Result<BenchmarkTask> {
    let mut train = Vec::new();
    for i in 0..10u64 {
        let mut m = gen_arm3(&GenParams::with_seed(mix_seed(seed, &[0xa3, i])))?;
        m.name = format!("arm3_t{:02}", i);
        train.push(reach(m));
    }
    // Held-out variation from a reserved stream.
    let mut test = gen_arm3(&GenParams::with_seed(mix_seed(seed, &[0xa3, 0x7e57])))?;
    test.name = "arm3_test".into();
    Ok(BenchmarkTask {
        name: "arm3".into(),
        train,
        test: vec![reach(test)],
        obstacles: false,
    })
}

fn build_panda(seed: u64) -> Result<BenchmarkTask> {
    let base = real_arms::panda();
    let mut train = Vec::new();
    for i in 0..10u64 {
        let factors = random_scale_factors(base.n_links(), mix_seed(seed, &[0xfa2da, i]));
        let mut m = scale_arm(&base, &factors)?;
        m.name = format!("panda_s{:02}", i);
        train.push(reach(m));
    }
    Ok(BenchmarkTask {
        name: "panda".into(),
        train,
        test: vec![reach(base)],
        obstacles: false,
    })
}

fn build_ee_arm(seed: u64) -> Result<BenchmarkTask> {
    let prims = gen_prims_for(seed)?;
    let ur5like = real_arms::ur5_planar_proxy();
    let train = vec![
        reach(attach_end_effector(&prims, EeKind::Plane)?),
        reach(attach_end_effector(&prims, EeKind::Cylinder)?),
        reach(attach_end_effector(&ur5like, EeKind::Plane)?),
        reach(attach_end_effector(&ur5like, EeKind::Cylinder)?),
        reach(attach_end_effector(&ur5like, EeKind::Gripper)?),
    ];
    let test = vec![reach(attach_end_effector(&ur5like, EeKind::Stick)?)];
    Ok(BenchmarkTask {
        name: "ee_arm".into(),
        train,
        test,
        obstacles: false,
    })
}

fn build_ee_task(seed: u64) -> Result<BenchmarkTask> {
    let prims = gen_prims_for(seed)?;
    let ur5like = real_arms::ur5_planar_proxy();
    let train = vec![
        push(attach_end_effector(&prims, EeKind::Plane)?),
        reach(attach_end_effector(&ur5like, EeKind::Stick)?),
    ];
    let test = vec![push(attach_end_effector(&ur5like, EeKind::Plane)?)];
    Ok(BenchmarkTask {
        name: "ee_task".into(),
        train,
        test,
        obstacles: false,
    })
}

fn gen_prims_for(seed: u64) -> Result<Morphology> {
    let mut p = GenParams::with_seed(mix_seed(seed, &[0x9a17]));
    p.dof = 3;
    gen_primitive_category(PrimitiveKind::Prims, &p)
}

fn build_prims(seed: u64) -> Result<BenchmarkTask> {
    let mut stick_p = GenParams::with_seed(mix_seed(seed, &[0x57, 0]));
    stick_p.dof = 2;
    let mut nlink_p = GenParams::with_seed(mix_seed(seed, &[0x41, 1]));
    nlink_p.dof = 4;
    let mut prims_p = GenParams::with_seed(mix_seed(seed, &[0x9a, 2]));
    prims_p.dof = 3;
    let mut chain_p = GenParams::with_seed(mix_seed(seed, &[0xc4, 3]));
    chain_p.dof = 5;

    Ok(BenchmarkTask {
        name: "prims".into(),
        train: vec![
            reach(gen_primitive_category(PrimitiveKind::Stick, &stick_p)?),
            reach(gen_primitive_category(PrimitiveKind::NLink, &nlink_p)?),
            reach(gen_primitive_category(PrimitiveKind::Prims, &prims_p)?),
        ],
        test: vec![reach(gen_primitive_category(PrimitiveKind::Chain, &chain_p)?)],
        obstacles: false,
    })
}

fn build_arms(_seed: u64) -> Result<BenchmarkTask> {
    let ur5 = real_arms::ur5();
    let train = vec![
        reach(attach_end_effector(&ur5, EeKind::Stick)?),
        // The published Ez/Sawyer effectors are approximated by the cylinder
        // tool on the same arm.
        reach(attach_end_effector(&ur5, EeKind::Cylinder)?),
        reach(real_arms::panda()),
        reach(real_arms::kinova()),
        reach(real_arms::jaco()),
        reach(real_arms::xarm()),
        reach(real_arms::lwr()),
        reach(real_arms::yumi()),
        reach(real_arms::arm5()),
    ];
    Ok(BenchmarkTask {
        name: "arms".into(),
        train,
        test: vec![reach(real_arms::widowx())],
        obstacles: false,
    })
}

fn structurally_equal(a: &Morphology, b: &Morphology) -> bool {
    a.links == b.links && a.joints == b.joints
}

/// Build a split by name. Deterministic per (name, seed).
pub fn benchmark_split(name: &str, seed: u64) -> Result<BenchmarkTask> {
    let task = match name {
        "arm3" => build_arm3(seed)?,
        "panda" => build_panda(seed)?,
        "ee_arm" => build_ee_arm(seed)?,
        "ee_task" => build_ee_task(seed)?,
        "prims" => build_prims(seed)?,
        "arms" => build_arms(seed)?,
        other => return Err(Error::UnknownTask(other.into())),
    };
    debug_assert!(!task.train.is_empty() && !task.test.is_empty());
    for te in &task.test {
        for tr in &task.train {
            if structurally_equal(&te.morph, &tr.morph) {
                return Err(Error::Validation(format!(
                    "test morphology {} structurally equals train {}",
                    te.morph.name, tr.morph.name
                )));
            }
        }
    }
    Ok(task)
}

/// Per-train-robot cosine similarity of the test robot, sorted descending.
pub fn split_similarities(task: &BenchmarkTask) -> Result<Vec<(String, f64)>> {
    let test = &task.test[0].morph;
    let vt = morphology_vector(test)?;
    let mut rows = Vec::new();
    for e in &task.train {
        let v = morphology_vector(&e.morph)?;
        rows.push((e.morph.name.clone(), cosine_similarity(&vt, &v)?));
    }
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(rows)
}

/// Max train-test similarity for a split.
pub fn max_similarity(name: &str, seed: u64) -> Result<f64> {
    let task = benchmark_split(name, seed)?;
    let rows = split_similarities(&task)?;
    Ok(rows.first().map(|r| r.1).unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// Asset export: description files + manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTask {
    pub obstacles: bool,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub tasks: BTreeMap<String, ManifestTask>,
}

/// Write one split's description files under `dir/<task>/` and return its
/// manifest section.
pub fn write_split_assets(task: &BenchmarkTask, dir: &Path) -> Result<ManifestTask> {
    let sub = dir.join(&task.name);
    std::fs::create_dir_all(&sub)?;
    let write = |entries: &[TaskEntry]| -> Result<Vec<ManifestEntry>> {
        let mut out = Vec::new();
        for e in entries {
            let rel = format!("{}/{}.json", task.name, e.morph.name);
            std::fs::write(dir.join(&rel), save_morphology(&e.morph))?;
            out.push(ManifestEntry {
                file: rel,
                task: e.task,
            });
        }
        Ok(out)
    };
    Ok(ManifestTask {
        obstacles: task.obstacles,
        train: write(&task.train)?,
        test: write(&task.test)?,
    })
}

/// Export every split at `seed` plus `manifest.json`.
pub fn write_all_assets(dir: &Path, seed: u64) -> Result<Manifest> {
    let mut manifest = Manifest {
        version: 1,
        seed,
        tasks: BTreeMap::new(),
    };
    for name in SPLIT_NAMES {
        let task = benchmark_split(name, seed)?;
        let entry = write_split_assets(&task, dir)?;
        manifest.tasks.insert(name.to_string(), entry);
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::validate_morphology;

    #[test]
    fn arm3_split_shape() {
        let t = benchmark_split("arm3", 0).unwrap();
        assert_eq!(t.train.len(), 10);
        assert_eq!(t.test.len(), 1);
    }

    #[test]
    fn prims_split_tests_on_chain() {
        let t = benchmark_split("prims", 0).unwrap();
        assert_eq!(t.test.len(), 1);
        assert_eq!(t.test[0].morph.category, "chain");
    }

    #[test]
    fn unknown_split_errors() {
        assert!(matches!(benchmark_split("nope", 0), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn every_registry_morphology_validates() {
        for name in SPLIT_NAMES {
            let t = benchmark_split(name, 0).unwrap();
            for e in t.train.iter().chain(t.test.iter()) {
                let rep = validate_morphology(&e.morph);
                assert!(rep.ok(), "{}/{}: {}", name, e.morph.name, rep);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        for name in SPLIT_NAMES {
            let a = benchmark_split(name, 3).unwrap();
            let b = benchmark_split(name, 3).unwrap();
            for (x, y) in a.train.iter().zip(&b.train) {
                assert_eq!(save_morphology(&x.morph), save_morphology(&y.morph));
            }
        }
    }

    #[test]
    fn ee_task_split_mixes_tasks() {
        let t = benchmark_split("ee_task", 0).unwrap();
        assert_eq!(t.train[0].task, TaskKind::Push);
        assert_eq!(t.train[1].task, TaskKind::Reach);
        assert_eq!(t.test[0].task, TaskKind::Push);
        assert_eq!(t.test[0].morph.category, "ur5like-plane");
    }

    #[test]
    fn interpolation_splits_are_closer_than_extrapolation() {
        let arm3 = max_similarity("arm3", 0).unwrap();
        let panda = max_similarity("panda", 0).unwrap();
        let prims = max_similarity("prims", 0).unwrap();
        let arms = max_similarity("arms", 0).unwrap();
        assert!(
            arm3 > prims && arm3 > arms && panda > prims && panda > arms,
            "arm3 {arm3:.3} panda {panda:.3} prims {prims:.3} arms {arms:.3}"
        );
    }
}
