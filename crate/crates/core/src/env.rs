//! The `reach` and `push` MDPs over a kinematic world.
//!
//! Actions are per-joint position changes, masked to movable joints, clamped
//! per joint kind, and rejected wholesale if the resulting configuration
//! collides with the table or an obstacle. Push uses a quasi-static block
//! response: every robot-block contact translates the block by the horizontal
//! projection of its minimal translation vector.

use crate::collision::BodyId;
use crate::error::{Error, Result};
use crate::kinematics::forward_kinematics;
use crate::math::{vdist, Pose, Vec3};
use crate::morphology::{GeometryPrimitive, JointKind, Morphology};
use crate::scene::{scene_collisions, BlockState, Scene};
use crate::token::{encode_link_token, goal_token, object_token, LinkToken};
use crate::util::seed_stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Global cap on observation tokens (16 links + objects + goal).
pub const MAX_TOKENS: usize = 20;

pub const BLOCK_HALF: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reach,
    Push,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::Push => "push",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(TaskKind::Reach),
            "push" => Ok(TaskKind::Push),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    State,
    Pointcloud,
}

/// Push curriculum: the goal line grows linearly from `start_y` to `final_y`
/// over the first `end_progress` fraction of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumCfg {
    pub start_y: f64,
    pub final_y: f64,
    pub end_progress: f64,
}

impl Default for CurriculumCfg {
    fn default() -> Self {
        CurriculumCfg {
            start_y: 0.0,
            final_y: 0.20,
            end_progress: 0.5,
        }
    }
}

pub fn curriculum_threshold(progress: f64, cfg: &CurriculumCfg) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    if p >= cfg.end_progress {
        cfg.final_y
    } else {
        cfg.start_y + (cfg.final_y - cfg.start_y) * p / cfg.end_progress
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: TaskKind,
    pub obstacles: bool,
    pub horizon: usize,
    pub dt: f64,
    pub dq_max_revolute: f64,
    pub dq_max_prismatic: f64,
    /// reach weights (joint-limits, joint-acc, ee-goal, vicinity)
    pub reach_weights: [f64; 4],
    /// push weights (joint-limits, obj-dist, termination)
    pub push_weights: [f64; 3],
    pub vicinity_threshold: f64,
    pub obs_kind: ObsKind,
    pub pointcloud_n: usize,
    pub curriculum: CurriculumCfg,
    pub n_goals: usize,
    /// Stream mixed with the morphology hash for goal pre-generation; fixed
    /// so train and eval share the same goal set per robot.
    pub goal_seed: u64,
}

impl EnvConfig {
    pub fn default_for(task: TaskKind) -> Self {
        EnvConfig {
            task,
            obstacles: false,
            horizon: match task {
                TaskKind::Reach => 100,
                TaskKind::Push => 200,
            },
            dt: 0.1,
            dq_max_revolute: 0.05,
            dq_max_prismatic: 0.02,
            reach_weights: [1.0, 5e-4, 1.0, 2.0],
            push_weights: [1.0, 1.0, 10.0],
            vicinity_threshold: 0.05,
            obs_kind: ObsKind::State,
            pointcloud_n: 64,
            curriculum: CurriculumCfg::default(),
            n_goals: 100,
            goal_seed: 0x60a1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.vicinity_threshold > 0.0) {
            return Err(Error::Config("vicinity threshold must be positive".into()));
        }
        if !(self.dq_max_revolute > 0.0 && self.dq_max_prismatic > 0.0) {
            return Err(Error::Config("dq_max bounds must be positive".into()));
        }
        let finite = self.reach_weights.iter().chain(self.push_weights.iter()).all(|w| w.is_finite());
        if !finite {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        Ok(())
    }

    pub fn dq_max_for(&self, kind: JointKind) -> f64 {
        match kind {
            JointKind::Prismatic => self.dq_max_prismatic,
            _ => self.dq_max_revolute,
        }
    }
}

/// Mutable episode state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub q: Vec<f64>,
    pub q_prev: Vec<f64>,
    /// Previous commanded (masked, dq_max-clamped) joint deltas.
    pub dq_prev: Vec<f64>,
    pub block_pos: Option<Vec3>,
    pub goal: Option<Vec3>,
    pub step: usize,
    pub episode_reward: f64,
}

/// Uniform surface point clouds per environment object.
pub type PointCloud = Vec<Vec3>;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tokens: Vec<LinkToken>,
    /// Per-joint mask: true iff the joint is movable.
    pub action_mask: Vec<bool>,
    /// Point clouds per environment object (pointcloud mode only).
    pub clouds: Option<Vec<PointCloud>>,
    pub n_links: usize,
}

impl Observation {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    pub success: bool,
    pub ee_goal_dist: Option<f64>,
    pub block_y: Option<f64>,
    /// Step rejected because the commanded configuration hit the table or an
    /// obstacle.
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub reward_terms: Vec<(&'static str, f64)>,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

pub struct Env {
    pub morph: Morphology,
    pub cfg: EnvConfig,
    pub scene: Scene,
    pub goals: Vec<Vec3>,
    state: EnvState,
    rng: ChaCha8Rng,
    cloud_seed: u64,
    threshold_y: f64,
    finished: bool,
}

/// Everything needed to restore an env instance mid-episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub state: EnvState,
    pub rng: ChaCha8Rng,
    pub threshold_y: f64,
    pub finished: bool,
}

/// Rejection-sample `n` collision-free configurations and return their EE
/// positions. Deterministic per (morphology, seed); errors after a budget of
/// 10_000 * n draws.
pub fn sample_reach_goals(
    m: &Morphology,
    scene: &Scene,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let mut rng = seed_stream(seed, &[m.stable_hash(), 0x60a15]);
    let budget = 10_000usize * n;
    let mut attempts = 0;
    let mut goals = Vec::with_capacity(n);
    while goals.len() < n {
        if attempts >= budget {
            return Err(Error::GoalBudget { attempts });
        }
        attempts += 1;
        let q: Vec<f64> = m
            .joints
            .iter()
            .map(|j| {
                if j.is_movable() && j.upper > j.lower {
                    rng.gen_range(j.lower..=j.upper)
                } else {
                    0.0
                }
            })
            .collect();
        if scene_collisions(m, &q, scene, None)?.is_empty() {
            let fk = forward_kinematics(m, &q, &scene.mount)?;
            goals.push(fk.ee_pose.pos);
        }
    }
    Ok(goals)
}

impl Env {
    /// Build an environment instance. `seed` drives all episode randomness of
    /// this instance; goal pre-generation uses `cfg.goal_seed` so every
    /// instance of the same morphology shares one goal set.
    pub fn new(morph: Morphology, cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let report = crate::morphology::validate_morphology(&morph);
        if !report.ok() {
            return Err(Error::Validation(report.to_string()));
        }
        let scene = Scene::build(&morph, cfg.obstacles, cfg.goal_seed)?;
        let goals = match cfg.task {
            TaskKind::Reach => sample_reach_goals(&morph, &scene, cfg.n_goals, cfg.goal_seed)?,
            TaskKind::Push => Vec::new(),
        };
        let n_joints = morph.n_joints();
        let threshold_y = cfg.curriculum.final_y;
        Ok(Env {
            morph,
            cfg,
            scene,
            goals,
            state: EnvState {
                q: vec![0.0; n_joints],
                q_prev: vec![0.0; n_joints],
                dq_prev: vec![0.0; n_joints],
                block_pos: None,
                goal: None,
                step: 0,
                episode_reward: 0.0,
            },
            rng: seed_stream(seed, &[0xE0]),
            cloud_seed: seed_stream(seed, &[0xC1]).gen(),
            threshold_y,
            finished: true,
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn threshold_y(&self) -> f64 {
        self.threshold_y
    }

    /// Update the push curriculum from training progress in [0, 1].
    pub fn set_progress(&mut self, progress: f64) {
        self.threshold_y = curriculum_threshold(progress, &self.cfg.curriculum);
    }

    pub fn set_threshold_y(&mut self, y: f64) {
        self.threshold_y = y;
    }

    /// Replace the pre-generated goal set (testing hook).
    pub fn override_goals(&mut self, goals: Vec<Vec3>) {
        self.goals = goals;
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: self.state.clone(),
            rng: self.rng.clone(),
            threshold_y: self.threshold_y,
            finished: self.finished,
        }
    }

    pub fn restore(&mut self, snap: EnvSnapshot) -> Result<()> {
        if snap.state.q.len() != self.morph.n_joints() {
            return Err(Error::Shape("snapshot joint count mismatch".into()));
        }
        self.state = snap.state;
        self.rng = snap.rng;
        self.threshold_y = snap.threshold_y;
        self.finished = snap.finished;
        Ok(())
    }

    pub fn block_state(&self) -> Option<BlockState> {
        self.state.block_pos.map(|pos| BlockState {
            geom: GeometryPrimitive::boxed(BLOCK_HALF, BLOCK_HALF, BLOCK_HALF),
            pose: Pose::from_pos(pos),
        })
    }

    pub fn reset(&mut self) -> Result<Observation> {
        let home = self.morph.home_config();
        self.state.q_prev = home.clone();
        self.state.dq_prev = vec![0.0; home.len()];
        self.state.q = home;
        self.state.step = 0;
        self.state.episode_reward = 0.0;
        self.finished = false;

        match self.cfg.task {
            TaskKind::Reach => {
                if self.goals.is_empty() {
                    return Err(Error::Env("reach goal set is empty".into()));
                }
                let idx = self.rng.gen_range(0..self.goals.len());
                self.state.goal = Some(self.goals[idx]);
                self.state.block_pos = None;
            }
            TaskKind::Push => {
                self.state.goal = None;
                let mut pos = [0.0, 0.0, BLOCK_HALF];
                for _ in 0..100 {
                    pos = [
                        self.rng.gen_range(-0.05..0.05),
                        self.rng.gen_range(-0.25..-0.15),
                        BLOCK_HALF,
                    ];
                    let block = BlockState {
                        geom: GeometryPrimitive::boxed(BLOCK_HALF, BLOCK_HALF, BLOCK_HALF),
                        pose: Pose::from_pos(pos),
                    };
                    let hits = self
                        .scene
                        .obstacles
                        .iter()
                        .any(|o| crate::collision::pair_collision(&o.geom, &o.pose, &block.geom, &block.pose).is_some());
                    if !hits {
                        break;
                    }
                }
                self.state.block_pos = Some(pos);
            }
        }
        self.assemble_observation()
    }

    /// Apply a masked, clamped joint-delta command. Returns (new q, commanded
    /// deltas, blocked flag).
    pub fn apply_action(&self, action: &[f64]) -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let n = self.morph.n_joints();
        if action.len() != n {
            return Err(Error::Shape(format!(
                "expected {} action entries, got {}",
                n,
                action.len()
            )));
        }
        let mut command = vec![0.0; n];
        for (j, joint) in self.morph.joints.iter().enumerate() {
            if !joint.is_movable() {
                continue;
            }
            let bound = self.cfg.dq_max_for(joint.kind);
            command[j] = action[j].clamp(-bound, bound);
        }
        let mut q_new: Vec<f64> = self
            .state
            .q
            .iter()
            .zip(self.morph.joints.iter())
            .zip(&command)
            .map(|((q, joint), dq)| (q + dq).clamp(joint.lower, joint.upper))
            .collect();

        let contacts = scene_collisions(&self.morph, &q_new, &self.scene, None)?;
        let blocked = contacts
            .iter()
            .any(|c| matches!(c.b_id, BodyId::Table | BodyId::Obstacle(_)));
        if blocked {
            q_new = self.state.q.clone();
        }
        Ok((q_new, command, blocked))
    }

    fn joint_limit_penalty(&self) -> f64 {
        let mut total = 0.0;
        for (q, joint) in self.state.q.iter().zip(&self.morph.joints) {
            if !joint.is_movable() {
                continue;
            }
            let center = 0.5 * (joint.lower + joint.upper);
            let half = 0.5 * (joint.upper - joint.lower);
            let soft_lo = center - 0.95 * half;
            let soft_hi = center + 0.95 * half;
            total += (q - soft_hi).max(soft_lo - q).max(0.0);
        }
        -total
    }

    fn joint_acc_penalty(&self, command: &[f64]) -> f64 {
        let dt2 = self.cfg.dt * self.cfg.dt;
        let total: f64 = command
            .iter()
            .zip(&self.state.dq_prev)
            .map(|(c, p)| ((c - p) / dt2).abs())
            .sum();
        -total
    }

    fn ee_distance(&self) -> Result<f64> {
        let goal = self
            .state
            .goal
            .ok_or_else(|| Error::Env("reach state has no goal".into()))?;
        let fk = forward_kinematics(&self.morph, &self.state.q, &self.scene.mount)?;
        Ok(vdist(fk.ee_pose.pos, goal))
    }

    /// Reach reward terms at the current state given the commanded deltas.
    pub fn compute_reach_reward(&self, command: &[f64]) -> Result<(f64, Vec<(&'static str, f64)>)> {
        let dist = self.ee_distance()?;
        let terms = vec![
            ("joint_limits", self.joint_limit_penalty()),
            ("joint_acc", self.joint_acc_penalty(command)),
            ("ee_goal", -dist),
            (
                "vicinity",
                if dist < self.cfg.vicinity_threshold { 1.0 } else { 0.0 },
            ),
        ];
        let w = &self.cfg.reach_weights;
        let total = terms
            .iter()
            .zip(w.iter())
            .map(|((_, t), wi)| wi * t)
            .sum();
        Ok((total, terms))
    }

    /// Push reward terms; `success` mirrors the termination trigger.
    pub fn compute_push_reward(&self, threshold_y: f64) -> Result<(f64, Vec<(&'static str, f64)>, bool)> {
        let block = self
            .state
            .block_pos
            .ok_or_else(|| Error::Env("push state has no block".into()))?;
        let success = block[1] >= threshold_y;
        let terms = vec![
            ("joint_limits", self.joint_limit_penalty()),
            ("obj_dist", -(threshold_y - block[1]).max(0.0)),
            ("termination", if success { 1.0 } else { 0.0 }),
        ];
        let w = &self.cfg.push_weights;
        let total = terms
            .iter()
            .zip(w.iter())
            .map(|((_, t), wi)| wi * t)
            .sum();
        Ok((total, terms, success))
    }

    /// Quasi-static block response: translate by the horizontal projection of
    /// each robot-block mtv, then push fully out of any obstacle.
    fn update_block(&mut self) -> Result<()> {
        let Some(mut pos) = self.state.block_pos else {
            return Ok(());
        };
        let geom = GeometryPrimitive::boxed(BLOCK_HALF, BLOCK_HALF, BLOCK_HALF);
        let block = BlockState {
            geom,
            pose: Pose::from_pos(pos),
        };
        let contacts = scene_collisions(&self.morph, &self.state.q, &self.scene, Some(&block))?;
        for c in contacts.iter().filter(|c| c.b_id == BodyId::Block) {
            pos[0] += c.mtv[0];
            pos[1] += c.mtv[1];
            // z component dropped: the block slides on the table.
        }

        // Obstacle clamp: resolve fully, iterating a few times in case the
        // push-out trades one contact for another.
        for _ in 0..8 {
            let block = BlockState {
                geom,
                pose: Pose::from_pos(pos),
            };
            let mut any = false;
            for obs in &self.scene.obstacles {
                if let Some(c) =
                    crate::collision::pair_collision(&obs.geom, &obs.pose, &block.geom, &block.pose)
                {
                    pos = crate::math::vadd(pos, c.mtv);
                    any = true;
                }
            }
            if !any {
                break;
            }
        }
        self.state.block_pos = Some(pos);
        Ok(())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.finished {
            return Err(Error::Env("step on a finished episode".into()));
        }

        let (q_new, command, blocked) = self.apply_action(action)?;
        self.state.q_prev = std::mem::replace(&mut self.state.q, q_new);

        if self.cfg.task == TaskKind::Push {
            self.update_block()?;
        }

        let (reward, terms, info) = match self.cfg.task {
            TaskKind::Reach => {
                let (r, t) = self.compute_reach_reward(&command)?;
                let dist = self.ee_distance()?;
                (
                    r,
                    t,
                    StepInfo {
                        success: dist < self.cfg.vicinity_threshold,
                        ee_goal_dist: Some(dist),
                        block_y: None,
                        blocked,
                    },
                )
            }
            TaskKind::Push => {
                let (r, t, success) = self.compute_push_reward(self.threshold_y)?;
                (
                    r,
                    t,
                    StepInfo {
                        success,
                        ee_goal_dist: None,
                        block_y: self.state.block_pos.map(|b| b[1]),
                        blocked,
                    },
                )
            }
        };
        self.state.dq_prev = command;
        self.state.step += 1;
        self.state.episode_reward += reward;

        let (terminated, truncated) = match self.cfg.task {
            TaskKind::Reach => (false, self.state.step >= self.cfg.horizon),
            TaskKind::Push => {
                if info.success {
                    (true, false)
                } else {
                    (false, self.state.step >= self.cfg.horizon)
                }
            }
        };
        self.finished = terminated || truncated;

        let observation = self.assemble_observation()?;
        Ok(StepResult {
            observation,
            reward,
            reward_terms: terms,
            terminated,
            truncated,
            info,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Environment objects in token order: block first (push), then obstacles.
    fn env_objects(&self) -> Vec<(GeometryPrimitive, Pose)> {
        let mut out = Vec::new();
        if let Some(b) = self.block_state() {
            out.push((b.geom, b.pose));
        }
        for o in &self.scene.obstacles {
            out.push((o.geom, o.pose));
        }
        out
    }

    pub fn assemble_observation(&self) -> Result<Observation> {
        let n_links = self.morph.n_links();
        let mut tokens = Vec::with_capacity(n_links + 3);
        for i in 0..n_links {
            let q = if i == 0 { 0.0 } else { self.state.q[i - 1] };
            tokens.push(encode_link_token(&self.morph, i, q)?);
        }

        let objects = self.env_objects();
        let clouds = match self.cfg.obs_kind {
            ObsKind::State => {
                for (geom, pose) in &objects {
                    tokens.push(object_token(geom, pose));
                }
                None
            }
            ObsKind::Pointcloud => Some(self.sample_point_cloud()?),
        };

        if self.cfg.task == TaskKind::Reach {
            let goal = self
                .state
                .goal
                .ok_or_else(|| Error::Env("reach state has no goal".into()))?;
            tokens.push(goal_token(goal));
        }

        if tokens.len() > MAX_TOKENS {
            return Err(Error::Shape(format!(
                "{} tokens exceed MAX_TOKENS = {}",
                tokens.len(),
                MAX_TOKENS
            )));
        }

        Ok(Observation {
            tokens,
            action_mask: self.morph.movable_mask(),
            clouds,
            n_links,
        })
    }

    /// Uniform surface samples for each environment object, in world frame,
    /// deterministic per (instance seed, step).
    pub fn sample_point_cloud(&self) -> Result<Vec<PointCloud>> {
        let objects = self.env_objects();
        let mut clouds = Vec::with_capacity(objects.len());
        for (idx, (geom, pose)) in objects.iter().enumerate() {
            let mut rng = seed_stream(self.cloud_seed, &[self.state.step as u64, idx as u64]);
            let mut points = Vec::with_capacity(self.cfg.pointcloud_n);
            for _ in 0..self.cfg.pointcloud_n {
                points.push(pose.transform_point(sample_surface(geom, &mut rng)));
            }
            clouds.push(points);
        }
        Ok(clouds)
    }
}

/// Uniform sample on the surface of a primitive, in its local frame.
fn sample_surface(geom: &GeometryPrimitive, rng: &mut ChaCha8Rng) -> Vec3 {
    match geom.kind {
        crate::morphology::GeomKind::Sphere => {
            let r = geom.params[0];
            // Marsaglia: normalize a Gaussian triple.
            loop {
                let v = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0f64),
                ];
                let n = crate::math::vnorm(v);
                if n > 1e-6 && n <= 1.0 {
                    return crate::math::vscale(v, r / n);
                }
            }
        }
        crate::morphology::GeomKind::Box => {
            let h = geom.params;
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum::<f64>() * 2.0;
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            let mut sign = 1.0;
            'outer: for i in 0..3 {
                for s in [1.0, -1.0] {
                    if pick < areas[i] {
                        face = i;
                        sign = s;
                        break 'outer;
                    }
                    pick -= areas[i];
                }
            }
            let mut p = [0.0; 3];
            p[face] = sign * h[face];
            for i in 0..3 {
                if i != face {
                    p[i] = rng.gen_range(-h[i]..=h[i]);
                }
            }
            p
        }
        crate::morphology::GeomKind::Cylinder => {
            let r = geom.params[0];
            let hh = geom.params[2];
            let lateral = 2.0 * std::f64::consts::PI * r * (2.0 * hh);
            let caps = 2.0 * std::f64::consts::PI * r * r;
            let u = rng.gen_range(0.0..lateral + caps);
            if u < lateral {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                [r * theta.cos(), r * theta.sin(), rng.gen_range(-hh..=hh)]
            } else {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let rad = r * rng.gen_range(0.0..1.0f64).sqrt();
                let z = if rng.gen_bool(0.5) { hh } else { -hh };
                [rad * theta.cos(), rad * theta.sin(), z]
            }
        }
    }
}
