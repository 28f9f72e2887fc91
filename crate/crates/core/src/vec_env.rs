//! Batch of heterogeneous-morphology environment instances.
//!
//! Lanes are grouped in contiguous equal-size blocks per morphology; finished
//! episodes auto-reset, with the step result carrying the final-step flags
//! and the fresh observation.

use crate::env::{Env, EnvConfig, Observation, StepResult, TaskKind};
use crate::error::{Error, Result};
use crate::morphology::Morphology;
use crate::util::mix_seed;

pub struct VecEnv {
    envs: Vec<Env>,
    lanes_per_morph: usize,
    n_morphs: usize,
}

impl VecEnv {
    /// `entries` pairs each morphology with its task; `cfg_for` maps a task
    /// kind to its env config. `n_envs` must be divisible by the entry count.
    pub fn new<F>(
        entries: &[(Morphology, TaskKind)],
        cfg_for: F,
        n_envs: usize,
        seed: u64,
    ) -> Result<Self>
    where
        F: Fn(TaskKind) -> EnvConfig,
    {
        if entries.is_empty() {
            return Err(Error::Config("no morphologies for VecEnv".into()));
        }
        if n_envs == 0 || n_envs % entries.len() != 0 {
            return Err(Error::Config(format!(
                "env count {} not divisible by morphology count {}",
                n_envs,
                entries.len()
            )));
        }
        let lanes_per_morph = n_envs / entries.len();
        let mut envs = Vec::with_capacity(n_envs);
        for (m_idx, (morph, task)) in entries.iter().enumerate() {
            let cfg = cfg_for(*task);
            for lane in 0..lanes_per_morph {
                let lane_seed = mix_seed(seed, &[m_idx as u64, lane as u64, 0x1a9e]);
                envs.push(Env::new(morph.clone(), cfg.clone(), lane_seed)?);
            }
        }
        Ok(VecEnv {
            envs,
            lanes_per_morph,
            n_morphs: entries.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn n_morphs(&self) -> usize {
        self.n_morphs
    }

    /// Morphology index owning lane `i`.
    pub fn morph_of_lane(&self, lane: usize) -> usize {
        lane / self.lanes_per_morph
    }

    pub fn env(&self, lane: usize) -> &Env {
        &self.envs[lane]
    }

    pub fn env_mut(&mut self, lane: usize) -> &mut Env {
        &mut self.envs[lane]
    }

    pub fn reset_all(&mut self) -> Result<Vec<Observation>> {
        self.envs.iter_mut().map(|e| e.reset()).collect()
    }

    /// Push curriculum progress for all lanes.
    pub fn set_progress(&mut self, progress: f64) {
        for e in &mut self.envs {
            e.set_progress(progress);
        }
    }

    /// Element-wise step with auto-reset. Results are in lane order.
    pub fn batch_step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<StepResult>> {
        if actions.len() != self.envs.len() {
            return Err(Error::Shape(format!(
                "{} actions for {} envs",
                actions.len(),
                self.envs.len()
            )));
        }
        let mut out = Vec::with_capacity(self.envs.len());
        for (env, action) in self.envs.iter_mut().zip(actions) {
            let mut result = env.step(action).map_err(|e| {
                Error::Env(format!("lane failed: {e}"))
            })?;
            if result.terminated || result.truncated {
                result.observation = env.reset()?;
            }
            out.push(result);
        }
        Ok(out)
    }
}
