//! Morphology-conditioned PPO training.
//!
//! One update = a fixed-length rollout across all env lanes, GAE with
//! EMA-critic bootstrapping, and clipped surrogate updates over shuffled
//! minibatches, with optional per-morphology task reweighting. Everything is
//! seeded: two runs with the same config produce bit-identical metrics.

use crate::config::{AgentKind, RunConfig};
use crate::env::{Observation, TaskKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::morphology::Morphology;
use crate::nn::Adam;
use crate::policy::{
    sample_action, symexp, symlog, PolicyNet, PpoBatch, PpoHyper, SampleMode, ValueTransform,
};
use crate::registry::TaskEntry;
use crate::util::{mix_seed, seed_stream};
use crate::vec_env::VecEnv;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reweighting {
    Off,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_env_steps: u64,
    pub n_envs: usize,
    pub rollout_t: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub ema_tau: f64,
    pub reweighting: Reweighting,
    /// Evaluate + checkpoint every this many env steps.
    pub eval_every: u64,
    /// Env steps per morphology in periodic evaluations.
    pub eval_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_env_steps: 1_000_000,
            n_envs: 128,
            rollout_t: 128,
            epochs: 4,
            minibatches: 16,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            lr_schedule: LrSchedule::Constant,
            ema_tau: 0.98,
            reweighting: Reweighting::Off,
            eval_every: 25_000,
            eval_steps: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let batch = self.n_envs * self.rollout_t;
        if batch == 0 || batch % self.minibatches != 0 {
            return Err(Error::Config(format!(
                "minibatches {} must divide n_envs*rollout_T = {}",
                self.minibatches, batch
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must be in (0, 1)".into()));
        }
        if self.clip < 0.0 {
            return Err(Error::Config("clip must be >= 0".into()));
        }
        if !(self.ema_tau >= 0.0 && self.ema_tau <= 1.0) {
            return Err(Error::Config("ema_tau must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Flat per-(step, lane) rollout storage; index = t * n_envs + lane.
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub t_len: usize,
    pub obs: Vec<Observation>,
    pub actions_cont: Vec<Vec<f64>>,
    pub actions_disc: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Decoded (plain-return-space) EMA-critic values per sample.
    pub values: Vec<f64>,
    /// Decoded bootstrap value per lane for the observation after the last step.
    pub bootstrap: Vec<f64>,
    /// Morphology index per lane.
    pub morph_ids: Vec<usize>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.n_envs * self.t_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard GAE recursion with episode-boundary resets; returns
/// (advantages, value targets), both in plain return space.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = buffer.n_envs;
    let t_len = buffer.t_len;
    let mut adv = vec![0.0; n * t_len];
    let mut targets = vec![0.0; n * t_len];
    for lane in 0..n {
        let mut gae = 0.0;
        let mut next_value = buffer.bootstrap[lane];
        for t in (0..t_len).rev() {
            let i = t * n + lane;
            let not_done = if buffer.dones[i] { 0.0 } else { 1.0 };
            let delta = buffer.rewards[i] + gamma * not_done * next_value - buffer.values[i];
            gae = delta + gamma * lambda * not_done * gae;
            adv[i] = gae;
            targets[i] = gae + buffer.values[i];
            next_value = buffer.values[i];
        }
    }
    (adv, targets)
}

/// In-place normalization to zero mean, unit variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Per-morphology task weights with mean 1. `dirichlet` draws a symmetric
/// Dirichlet(1) vector scaled by n, resampled per update.
pub fn sample_task_weights(n_morphs: usize, mode: Reweighting, seed: u64, update_idx: u64) -> Vec<f64> {
    match mode {
        Reweighting::Off => vec![1.0; n_morphs],
        Reweighting::Dirichlet => {
            let mut rng = seed_stream(seed, &[0xd1c7, update_idx]);
            // Dirichlet(1,...,1) = normalized iid Exp(1) draws.
            let draws: Vec<f64> = (0..n_morphs)
                .map(|_| {
                    let u: f64 = rand::Rng::gen_range(&mut rng, f64::MIN_POSITIVE..1.0);
                    -u.ln()
                })
                .collect();
            let total: f64 = draws.iter().sum();
            draws.iter().map(|d| n_morphs as f64 * d / total).collect()
        }
    }
}

/// Elementwise tau * ema + (1 - tau) * live over two equal-length slices.
pub fn ema_update(live: &[f64], ema: &mut [f64], tau: f64) -> Result<()> {
    if live.len() != ema.len() {
        return Err(Error::Shape(format!(
            "ema shape mismatch: {} vs {}",
            live.len(),
            ema.len()
        )));
    }
    for (e, l) in ema.iter_mut().zip(live) {
        *e = tau * *e + (1.0 - tau) * l;
    }
    Ok(())
}

/// One full PPO update pass over a collected buffer: GAE, advantage
/// normalization, task reweighting, shuffled clipped minibatch steps, and
/// the post-update EMA critic move.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    net: &mut PolicyNet,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    n_morphs: usize,
    seed: u64,
    update_idx: u64,
    lr: f64,
) -> Result<UpdateStats> {
    let (mut advantages, targets) = compute_gae(buffer, cfg.gamma, cfg.gae_lambda);
    normalize_advantages(&mut advantages);
    let encode = |v: f64| match net.cfg.value_transform {
        ValueTransform::Symlog => symlog(v),
        ValueTransform::Identity => v,
    };
    let targets_raw: Vec<f64> = targets.iter().map(|&t| encode(t)).collect();

    let task_weights = sample_task_weights(n_morphs, cfg.reweighting, seed, update_idx);
    let sample_weights: Vec<f64> = (0..buffer.len())
        .map(|i| task_weights[buffer.morph_ids[i % buffer.n_envs]])
        .collect();

    let hyper = PpoHyper {
        clip: cfg.clip,
        value_coef: cfg.value_coef,
        entropy_coef: cfg.entropy_coef,
    };
    let discrete = !buffer.actions_disc.is_empty();

    let mut indices: Vec<usize> = (0..buffer.len()).collect();
    let mut shuffle_rng = seed_stream(seed, &[0x5f17, update_idx]);
    let mb_count = cfg.minibatches.min(buffer.len().max(1));
    let mb_size = buffer.len() / mb_count;

    let mut stats = UpdateStats {
        lr,
        mean_reward: buffer.rewards.iter().sum::<f64>() / buffer.len().max(1) as f64,
        ..Default::default()
    };
    let mut n_steps = 0.0;

    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        for mb in 0..mb_count {
            let idxs = &indices[mb * mb_size..(mb + 1) * mb_size];
            let batch = PpoBatch {
                obs: idxs.iter().map(|&i| &buffer.obs[i]).collect(),
                actions_cont: if discrete {
                    None
                } else {
                    Some(idxs.iter().map(|&i| buffer.actions_cont[i].as_slice()).collect())
                },
                actions_disc: if discrete {
                    Some(idxs.iter().map(|&i| buffer.actions_disc[i].as_slice()).collect())
                } else {
                    None
                },
                old_log_probs: idxs.iter().map(|&i| buffer.log_probs[i]).collect(),
                advantages: idxs.iter().map(|&i| advantages[i]).collect(),
                value_targets_raw: idxs.iter().map(|&i| targets_raw[i]).collect(),
                weights: idxs.iter().map(|&i| sample_weights[i]).collect(),
            };
            let mut grads = net.params.zero_grad();
            let loss = net
                .ppo_loss_backward(&batch, &hyper, &mut grads)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                        update: update_idx as usize,
                        detail,
                    },
                    other => other,
                })?;
            adam.step(&mut net.params, &grads, lr);
            stats.policy_loss += loss.policy;
            stats.value_loss += loss.value;
            stats.entropy += loss.entropy;
            stats.total_loss += loss.total;
            n_steps += 1.0;
        }
    }
    if n_steps > 0.0 {
        stats.policy_loss /= n_steps;
        stats.value_loss /= n_steps;
        stats.entropy /= n_steps;
        stats.total_loss /= n_steps;
    }

    net.ema_update(cfg.ema_tau);
    Ok(stats)
}

#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub mean_reward: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    run: RunConfig,
    params_data: Vec<f64>,
    ema_data: Vec<f64>,
    adam: Adam,
    steps_done: u64,
    update_idx: u64,
    lane_rngs: Vec<ChaCha8Rng>,
    env_snapshots: Vec<crate::env::EnvSnapshot>,
    best_mt: f64,
    best_step: u64,
}

pub struct Trainer {
    pub run: RunConfig,
    pub net: PolicyNet,
    pub entries: Vec<TaskEntry>,
    vec_env: VecEnv,
    obs: Vec<Observation>,
    lane_rngs: Vec<ChaCha8Rng>,
    adam: Adam,
    pub steps_done: u64,
    pub update_idx: u64,
    best_mt: f64,
    best_step: u64,
}

impl Trainer {
    /// Build a trainer from a run config; resolves the benchmark split and
    /// spawns the env lanes.
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let entries = run.resolve_entries()?;
        Self::new_with_entries(run, entries)
    }

    pub fn progress(&self) -> f64 {
        if self.run.train.total_env_steps == 0 {
            1.0
        } else {
            self.steps_done as f64 / self.run.train.total_env_steps as f64
        }
    }

    fn decode_value(&self, raw: f64) -> f64 {
        match self.net.cfg.value_transform {
            ValueTransform::Symlog => symexp(raw),
            ValueTransform::Identity => raw,
        }
    }

    /// Collect `t_len` steps from every lane with stochastic sampling.
    pub fn collect_rollout(&mut self, t_len: usize) -> Result<RolloutBuffer> {
        let n = self.vec_env.len();
        let discrete = matches!(
            self.net.cfg.action_head,
            crate::policy::ActionHeadKind::Discrete
        );
        self.vec_env.set_progress(self.progress());

        let mut buffer = RolloutBuffer {
            n_envs: n,
            t_len,
            obs: Vec::with_capacity(n * t_len),
            actions_cont: Vec::with_capacity(if discrete { 0 } else { n * t_len }),
            actions_disc: Vec::with_capacity(if discrete { n * t_len } else { 0 }),
            log_probs: Vec::with_capacity(n * t_len),
            rewards: vec![0.0; n * t_len],
            dones: vec![false; n * t_len],
            values: vec![0.0; n * t_len],
            bootstrap: vec![0.0; n],
            morph_ids: (0..n).map(|lane| self.vec_env.morph_of_lane(lane)).collect(),
        };

        for t in 0..t_len {
            let obs_refs: Vec<&Observation> = self.obs.iter().collect();
            let outputs = self.net.forward(&obs_refs)?;
            let mut actions: Vec<Vec<f64>> = Vec::with_capacity(n);
            for (lane, out) in outputs.iter().enumerate() {
                let (dq, lp, bins) =
                    sample_action(&out.dist, SampleMode::Stochastic, &mut self.lane_rngs[lane]);
                buffer.log_probs.push(lp);
                if discrete {
                    buffer.actions_disc.push(bins);
                } else {
                    buffer.actions_cont.push(dq.clone());
                }
                buffer.values[t * n + lane] = self.decode_value(out.value_raw_ema);
                actions.push(dq);
            }
            for ob in &self.obs {
                buffer.obs.push(ob.clone());
            }
            let results = self.vec_env.batch_step(&actions)?;
            for (lane, r) in results.into_iter().enumerate() {
                buffer.rewards[t * n + lane] = r.reward;
                buffer.dones[t * n + lane] = r.terminated || r.truncated;
                self.obs[lane] = r.observation;
            }
        }

        let obs_refs: Vec<&Observation> = self.obs.iter().collect();
        let outputs = self.net.forward(&obs_refs)?;
        for (lane, out) in outputs.iter().enumerate() {
            buffer.bootstrap[lane] = self.decode_value(out.value_raw_ema);
        }
        Ok(buffer)
    }

    fn current_lr(&self) -> f64 {
        match self.run.train.lr_schedule {
            LrSchedule::Constant => self.run.train.lr,
            LrSchedule::Linear => self.run.train.lr * (1.0 - self.progress()).max(0.0),
        }
    }

    /// Clipped PPO update over the buffer; returns aggregate loss stats.
    pub fn ppo_update(&mut self, buffer: &RolloutBuffer) -> Result<UpdateStats> {
        let lr = self.current_lr();
        ppo_update(
            &mut self.net,
            &mut self.adam,
            buffer,
            &self.run.train,
            self.entries.len(),
            self.run.seed,
            self.update_idx,
            lr,
        )
    }

    /// One collect + update cycle.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let buffer = self.collect_rollout(self.run.train.rollout_t)?;
        let stats = self.ppo_update(&buffer)?;
        self.steps_done += buffer.len() as u64;
        self.net.step = self.steps_done;
        self.update_idx += 1;
        Ok(stats)
    }

    /// Evaluate every training morphology with the deterministic policy.
    pub fn evaluate_train(&self, steps: usize) -> Result<Vec<EvalResult>> {
        let mut out = Vec::new();
        for entry in &self.entries {
            let cfg = self.run.env_config_for(entry.task);
            out.push(evaluate(
                &self.net,
                &entry.morph,
                &cfg,
                steps,
                self.run.seed,
                false,
            )?);
        }
        Ok(out)
    }

    // --- run-directory plumbing ---------------------------------------------------

    pub fn metrics_path(dir: &Path) -> PathBuf {
        dir.join("metrics.csv")
    }

    fn append_metrics(&self, dir: &Path, results: &[EvalResult]) -> Result<()> {
        let path = Self::metrics_path(dir);
        let mut file = if path.exists() {
            std::fs::OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "step,morphology,task,mean_reward,success_rate,score")?;
            f
        };
        for r in results {
            writeln!(
                file,
                "{},{},{},{},{},{}",
                self.steps_done,
                r.morphology,
                r.task.as_str(),
                r.raw_mean,
                r.success_rate,
                r.score
            )?;
        }
        Ok(())
    }

    fn checkpoint_meta(&self) -> Option<serde_json::Value> {
        serde_json::to_value(&self.run).ok()
    }

    fn eval_and_log(&mut self, dir: &Path) -> Result<f64> {
        let results = self.evaluate_train(self.run.train.eval_steps)?;
        self.append_metrics(dir, &results)?;
        let mt = crate::eval::mt_score(&results)?;
        self.net
            .save_checkpoint(self.checkpoint_meta(), &dir.join("checkpoints/latest.ckpt"))?;
        if mt > self.best_mt {
            self.best_mt = mt;
            self.best_step = self.steps_done;
            self.net
                .save_checkpoint(self.checkpoint_meta(), &dir.join("checkpoints/best.ckpt"))?;
        }
        self.save_state(&dir.join("checkpoints/state_latest.json"))?;
        Ok(mt)
    }

    /// Full training loop: alternate collect/update, evaluating and
    /// checkpointing every `eval_every` env steps.
    pub fn run_to_completion(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let mut next_eval = ((self.steps_done / self.run.train.eval_every) + 1)
            * self.run.train.eval_every;
        let mut last_eval = u64::MAX;
        while self.steps_done < self.run.train.total_env_steps {
            self.update()?;
            if self.steps_done >= next_eval {
                let mt = self.eval_and_log(dir)?;
                last_eval = self.steps_done;
                eprintln!(
                    "step {:>9} mt {:+.4} best {:+.4} @ {}",
                    self.steps_done, mt, self.best_mt, self.best_step
                );
                next_eval = ((self.steps_done / self.run.train.eval_every) + 1)
                    * self.run.train.eval_every;
            }
        }
        if last_eval != self.steps_done {
            let _ = self.eval_and_log(dir)?;
        }
        self.net
            .save_checkpoint(self.checkpoint_meta(), &dir.join("checkpoints/final.ckpt"))?;
        Ok(())
    }

    // --- resume ---------------------------------------------------------------------

    /// Serialize everything needed to continue training bit-identically.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let state = TrainerState {
            run: self.run.clone(),
            params_data: self.net.params.data.clone(),
            ema_data: self.net.ema_value.data.clone(),
            adam: self.adam.clone(),
            steps_done: self.steps_done,
            update_idx: self.update_idx,
            lane_rngs: self.lane_rngs.clone(),
            env_snapshots: (0..self.vec_env.len())
                .map(|lane| self.vec_env.env(lane).snapshot())
                .collect(),
            best_mt: self.best_mt,
            best_step: self.best_step,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string(&state)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_state(path: &Path) -> Result<Trainer> {
        let text = std::fs::read_to_string(path)?;
        let state: TrainerState = serde_json::from_str(&text)?;
        let mut trainer = Trainer::new(state.run)?;
        if trainer.net.params.data.len() != state.params_data.len()
            || trainer.net.ema_value.data.len() != state.ema_data.len()
        {
            return Err(Error::Checkpoint("trainer state shape mismatch".into()));
        }
        trainer.net.params.data = state.params_data;
        trainer.net.ema_value.data = state.ema_data;
        trainer.adam = state.adam;
        trainer.steps_done = state.steps_done;
        trainer.update_idx = state.update_idx;
        trainer.lane_rngs = state.lane_rngs;
        trainer.best_mt = state.best_mt;
        trainer.best_step = state.best_step;
        trainer.net.step = state.steps_done;
        for (lane, snap) in state.env_snapshots.into_iter().enumerate() {
            trainer.vec_env.env_mut(lane).restore(snap)?;
        }
        for lane in 0..trainer.vec_env.len() {
            trainer.obs[lane] = trainer.vec_env.env(lane).assemble_observation()?;
        }
        Ok(trainer)
    }

    /// Continue PPO on a single morphology for exactly `steps` env
    /// interactions. The lane layout is fixed (10 lanes x 100-step rollouts)
    /// so the usual budgets divide exactly.
    pub fn finetune(
        checkpoint: &Path,
        morph: &Morphology,
        task: TaskKind,
        steps: u64,
        base_run: &RunConfig,
    ) -> Result<PolicyNet> {
        let (net, _) = PolicyNet::load_checkpoint(checkpoint)?;
        let mut run = base_run.clone();
        run.agent = AgentKind::Se;
        run.train.n_envs = 10;
        run.train.rollout_t = 100;
        run.train.minibatches = 10;
        run.train.total_env_steps = steps;
        let chunk = (run.train.n_envs * run.train.rollout_t) as u64;
        if steps % chunk != 0 {
            return Err(Error::Config(format!(
                "finetune steps {steps} must be a multiple of {chunk}"
            )));
        }
        if net.cfg != run.resolved_policy() {
            return Err(Error::Checkpoint(
                "checkpoint policy config does not match run config".into(),
            ));
        }

        let mut trainer = Trainer::new_with_entries(
            run,
            vec![TaskEntry {
                morph: morph.clone(),
                task,
            }],
        )?;
        trainer.net = net;
        let start = trainer.net.step;
        while trainer.steps_done < steps {
            trainer.update()?;
        }
        trainer.net.step = start + trainer.steps_done;
        Ok(trainer.net)
    }

    /// Like [`Trainer::new`] but with explicit entries (fine-tuning path).
    pub fn new_with_entries(run: RunConfig, entries: Vec<TaskEntry>) -> Result<Self> {
        run.validate_sections()?;
        let n_morphs = entries.len();
        if run.train.n_envs % n_morphs != 0 {
            return Err(Error::Config(format!(
                "n_envs {} not divisible by morphology count {}",
                run.train.n_envs, n_morphs
            )));
        }
        let env_entries: Vec<(Morphology, TaskKind)> = entries
            .iter()
            .map(|e| (e.morph.clone(), e.task))
            .collect();
        let run_for_env = run.clone();
        let mut vec_env = VecEnv::new(
            &env_entries,
            move |task| run_for_env.env_config_for(task),
            run.train.n_envs,
            run.seed,
        )?;
        let obs = vec_env.reset_all()?;
        let net = PolicyNet::new(run.resolved_policy(), run.seed)?;
        let adam = Adam::new(net.params.n_params());
        let lane_rngs = (0..run.train.n_envs)
            .map(|lane| seed_stream(run.seed, &[lane as u64, 0xAC7]))
            .collect();
        Ok(Trainer {
            run,
            net,
            entries,
            vec_env,
            obs,
            lane_rngs,
            adam,
            steps_done: 0,
            update_idx: 0,
            best_mt: f64::NEG_INFINITY,
            best_step: 0,
        })
    }
}

// Seed helper shared by CLI and tests when deriving per-purpose seeds.
pub fn run_stream_seed(seed: u64, label: u64) -> u64 {
    mix_seed(seed, &[label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvConfig};
    use crate::morphology::{GeometryPrimitive, JointSpec, Link};
    use crate::math::Quat;
    use crate::policy::{ActionHeadKind, ActionDistribution, PolicyConfig, SampleMode};
    use rand::Rng;

    fn dummy_obs() -> Observation {
        // Minimal 2-link morphology: base + one revolute EE link.
        let m = Morphology {
            name: "bandit".into(),
            category: "test".into(),
            links: vec![
                Link {
                    index: 0,
                    parent: -1,
                    geometry: GeometryPrimitive::boxed(0.02, 0.02, 0.02),
                    origin_pos: [0.0, 0.0, 0.05],
                    origin_quat: Quat::IDENTITY,
                    is_ee: false,
                },
                Link {
                    index: 1,
                    parent: 0,
                    geometry: GeometryPrimitive::boxed(0.05, 0.01, 0.01),
                    origin_pos: [0.05, 0.0, 0.0],
                    origin_quat: Quat::IDENTITY,
                    is_ee: true,
                },
            ],
            joints: vec![JointSpec::revolute([0.0, 0.0, 1.0], [0.0, 0.0, 0.05], -1.0, 1.0)],
        };
        let mut cfg = EnvConfig::default_for(TaskKind::Reach);
        cfg.n_goals = 1;
        let mut env = Env::new(m, cfg, 0).unwrap();
        env.reset().unwrap()
    }

    /// Direct-summation GAE oracle: adv_t = sum_k (gamma*lambda)^k delta_{t+k}
    /// truncated at episode boundaries.
    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t_len = rewards.len();
        let mut adv = vec![0.0; t_len];
        for t in 0..t_len {
            let mut acc = 0.0;
            let mut coef = 1.0;
            for k in t..t_len {
                let next_v = if dones[k] {
                    0.0
                } else if k + 1 < t_len {
                    values[k + 1]
                } else {
                    bootstrap
                };
                let delta = rewards[k] + gamma * next_v - values[k];
                acc += coef * delta;
                if dones[k] {
                    break;
                }
                coef *= gamma * lambda;
            }
            adv[t] = acc;
        }
        adv
    }

    #[test]
    fn gae_matches_direct_summation_oracle() {
        let mut rng = crate::util::seed_stream(3, &[0x6ae]);
        for trial in 0..50 {
            let t_len = 20;
            let lanes = 3;
            let rewards: Vec<f64> = (0..t_len * lanes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..t_len * lanes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dones: Vec<bool> = (0..t_len * lanes).map(|_| rng.gen_bool(0.15)).collect();
            let bootstrap: Vec<f64> = (0..lanes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let buffer = RolloutBuffer {
                n_envs: lanes,
                t_len,
                obs: Vec::new(),
                actions_cont: Vec::new(),
                actions_disc: Vec::new(),
                log_probs: Vec::new(),
                rewards: rewards.clone(),
                dones: dones.clone(),
                values: values.clone(),
                bootstrap: bootstrap.clone(),
                morph_ids: vec![0; lanes],
            };
            let (adv, targets) = compute_gae(&buffer, 0.99, 0.95);
            for lane in 0..lanes {
                let r: Vec<f64> = (0..t_len).map(|t| rewards[t * lanes + lane]).collect();
                let v: Vec<f64> = (0..t_len).map(|t| values[t * lanes + lane]).collect();
                let d: Vec<bool> = (0..t_len).map(|t| dones[t * lanes + lane]).collect();
                let oracle = gae_oracle(&r, &v, &d, bootstrap[lane], 0.99, 0.95);
                for t in 0..t_len {
                    let i = t * lanes + lane;
                    assert!(
                        (adv[i] - oracle[t]).abs() < 1e-9,
                        "trial {trial} lane {lane} t {t}: {} vs {}",
                        adv[i],
                        oracle[t]
                    );
                    assert!((targets[i] - (oracle[t] + v[t])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gae_single_step_episode_target_is_reward() {
        let buffer = RolloutBuffer {
            n_envs: 1,
            t_len: 1,
            obs: Vec::new(),
            actions_cont: Vec::new(),
            actions_disc: Vec::new(),
            log_probs: Vec::new(),
            rewards: vec![0.7],
            dones: vec![true],
            values: vec![0.3],
            bootstrap: vec![123.0], // ignored: episode done
            morph_ids: vec![0],
        };
        let (adv, targets) = compute_gae(&buffer, 0.99, 0.95);
        assert!((targets[0] - 0.7).abs() < 1e-12);
        assert!((adv[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gae_constant_reward_fixed_point_has_zero_advantage() {
        let gamma: f64 = 0.99;
        let r = 0.5;
        let v = r / (1.0 - gamma);
        let t_len = 30;
        let buffer = RolloutBuffer {
            n_envs: 1,
            t_len,
            obs: Vec::new(),
            actions_cont: Vec::new(),
            actions_disc: Vec::new(),
            log_probs: Vec::new(),
            rewards: vec![r; t_len],
            dones: vec![false; t_len],
            values: vec![v; t_len],
            bootstrap: vec![v],
            morph_ids: vec![0],
        };
        let (adv, _) = compute_gae(&buffer, gamma, 0.95);
        for a in adv {
            assert!(a.abs() < 1e-9);
        }
    }

    #[test]
    fn advantage_normalization_zero_mean_unit_var() {
        let mut rng = crate::util::seed_stream(1, &[2]);
        let mut adv: Vec<f64> = (0..512).map(|_| rng.gen_range(-3.0..7.0)).collect();
        normalize_advantages(&mut adv);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let var = adv.iter().map(|a| a * a).sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn task_weights_off_is_all_ones() {
        assert_eq!(sample_task_weights(4, Reweighting::Off, 7, 9), vec![1.0; 4]);
    }

    #[test]
    fn dirichlet_weights_sum_to_n_and_have_unit_mean() {
        let n = 5;
        let draws = 10_000u64;
        let mut sums = vec![0.0; n];
        for u in 0..draws {
            let w = sample_task_weights(n, Reweighting::Dirichlet, 3, u);
            let total: f64 = w.iter().sum();
            assert!((total - n as f64).abs() < 1e-9);
            for (s, wi) in sums.iter_mut().zip(&w) {
                *s += wi;
            }
        }
        // Marginal of n*Dirichlet(1): variance (n-1)/(n+1).
        let sigma_mean = (((n - 1) as f64 / (n + 1) as f64) / draws as f64).sqrt();
        for s in sums {
            let mean = s / draws as f64;
            assert!(
                (mean - 1.0).abs() < 3.0 * sigma_mean,
                "mean weight {mean} vs 1.0 +- {}",
                3.0 * sigma_mean
            );
        }
    }

    #[test]
    fn ema_update_endpoints_and_decay() {
        let live = vec![2.0, -4.0];
        let mut ema = vec![1.0, 1.0];
        ema_update(&live, &mut ema, 1.0).unwrap();
        assert_eq!(ema, vec![1.0, 1.0]);
        ema_update(&live, &mut ema, 0.0).unwrap();
        assert_eq!(ema, live);

        let mut ema = vec![0.0];
        let tau: f64 = 0.9;
        for k in 1..=20 {
            ema_update(&[1.0], &mut ema, tau).unwrap();
            let expect = 1.0 - tau.powi(k);
            assert!((ema[0] - expect).abs() < 1e-12);
        }
        assert!(ema_update(&[1.0], &mut vec![1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn zero_epochs_and_zero_clip_leave_params_unchanged() {
        let mut net = PolicyNet::new(
            PolicyConfig {
                d_model: 8,
                mlp_hidden: vec![8],
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let before = net.params.data.clone();
        let obs = dummy_obs();
        let buffer = RolloutBuffer {
            n_envs: 2,
            t_len: 2,
            obs: vec![obs.clone(), obs.clone(), obs.clone(), obs],
            actions_cont: vec![vec![0.01]; 4],
            actions_disc: Vec::new(),
            log_probs: vec![-1.0; 4],
            rewards: vec![0.0; 4],
            dones: vec![true; 4],
            values: vec![0.0; 4],
            bootstrap: vec![0.0; 2],
            morph_ids: vec![0, 0],
        };
        let mut cfg = TrainConfig {
            epochs: 0,
            clip: 0.0,
            minibatches: 2,
            n_envs: 2,
            rollout_t: 2,
            ..Default::default()
        };
        cfg.validate().unwrap();
        let mut adam = Adam::new(net.params.n_params());
        ppo_update(&mut net, &mut adam, &buffer, &cfg, 1, 0, 0, 1e-3).unwrap();
        assert_eq!(net.params.data, before);
    }

    #[test]
    fn two_armed_bandit_reaches_greedy_optimum() {
        // One state, one movable joint, 3 bins; reward 1 for the top bin.
        let cfg = PolicyConfig {
            backbone: crate::policy::Backbone::Mlp,
            action_head: ActionHeadKind::Discrete,
            bins: 3,
            delta_min: 0.02,
            d_model: 8,
            mlp_hidden: vec![16],
            ..Default::default()
        };
        let mut net = PolicyNet::new(cfg, 1).unwrap();
        let mut adam = Adam::new(net.params.n_params());
        let obs = dummy_obs();
        let mut rng = crate::util::seed_stream(10, &[0xBA]);
        let train_cfg = TrainConfig {
            n_envs: 16,
            rollout_t: 4,
            minibatches: 4,
            epochs: 4,
            gamma: 0.99,
            ..Default::default()
        };

        for update in 0..200 {
            let n = train_cfg.n_envs;
            let t = train_cfg.rollout_t;
            let mut buffer = RolloutBuffer {
                n_envs: n,
                t_len: t,
                obs: Vec::new(),
                actions_cont: Vec::new(),
                actions_disc: Vec::new(),
                log_probs: Vec::new(),
                rewards: Vec::new(),
                dones: vec![true; n * t],
                values: Vec::new(),
                bootstrap: vec![0.0; n],
                morph_ids: vec![0; n],
            };
            let out = net.forward(&[&obs]).unwrap();
            for _ in 0..n * t {
                let (_, lp, bins) = crate::policy::sample_action(
                    &out[0].dist,
                    SampleMode::Stochastic,
                    &mut rng,
                );
                buffer.rewards.push(if bins[0] == 2 { 1.0 } else { 0.0 });
                buffer.log_probs.push(lp);
                buffer.actions_disc.push(bins);
                buffer.obs.push(obs.clone());
                buffer.values.push(out[0].value_raw);
            }
            ppo_update(&mut net, &mut adam, &buffer, &train_cfg, 1, 0, update, 3e-3).unwrap();
        }

        let out = net.forward(&[&obs]).unwrap();
        if let ActionDistribution::Discrete { probs, .. } = &out[0].dist {
            assert!(
                probs[0][2] > 0.95,
                "greedy probability {} after 200 updates",
                probs[0][2]
            );
        } else {
            panic!("expected discrete");
        }
    }

    #[test]
    fn update_is_deterministic_for_same_seed() {
        let mut run = RunConfig::default();
        run.benchmark = "arm3".into();
        run.agent = AgentKind::Se;
        run.train.n_envs = 4;
        run.train.rollout_t = 8;
        run.train.minibatches = 2;
        run.train.total_env_steps = 64;
        run.env.n_goals = Some(5);
        run.env.horizon = Some(10);
        let mut a = Trainer::new(run.clone()).unwrap();
        let mut b = Trainer::new(run).unwrap();
        for _ in 0..2 {
            a.update().unwrap();
            b.update().unwrap();
        }
        assert_eq!(a.net.params.data, b.net.params.data);
        assert_eq!(a.net.ema_value.data, b.net.ema_value.data);
    }

    #[test]
    fn rollout_buffer_shape_and_morph_ids() {
        let mut run = RunConfig::default();
        run.benchmark = "prims".into();
        run.agent = AgentKind::MeMlp;
        run.train.n_envs = 6;
        run.train.rollout_t = 5;
        run.train.minibatches = 2;
        run.env.n_goals = Some(5);
        run.env.horizon = Some(10);
        let mut t = Trainer::new(run).unwrap();
        let buffer = t.collect_rollout(5).unwrap();
        assert_eq!(buffer.len(), 30);
        assert_eq!(buffer.obs.len(), 30);
        assert_eq!(buffer.morph_ids, vec![0, 0, 1, 1, 2, 2]);
        // Morphologies in the buffer are exactly the train split.
        assert_eq!(t.entries.len(), 3);
    }

    #[test]
    fn finetune_zero_steps_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunConfig::default();
        run.benchmark = "arm3".into();
        run.agent = AgentKind::Se;
        run.train.n_envs = 2;
        run.train.rollout_t = 4;
        run.train.minibatches = 2;
        run.env.n_goals = Some(3);
        run.env.horizon = Some(5);
        let trainer = Trainer::new(run.clone()).unwrap();
        let path = dir.path().join("ck.json");
        trainer.net.save_checkpoint(None, &path).unwrap();

        let split = run.split().unwrap();
        let net = Trainer::finetune(&path, &split.test[0].morph, TaskKind::Reach, 0, &run).unwrap();
        assert_eq!(net.params.data, trainer.net.params.data);
        assert_eq!(net.step, trainer.net.step);

        // Step counter advances by exactly `steps`.
        let net2 =
            Trainer::finetune(&path, &split.test[0].morph, TaskKind::Reach, 1000, &run).unwrap();
        assert_eq!(net2.step, trainer.net.step + 1000);
        assert!(
            Trainer::finetune(&path, &split.test[0].morph, TaskKind::Reach, 1234, &run).is_err()
        );
    }
}
