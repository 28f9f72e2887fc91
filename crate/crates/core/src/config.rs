//! Run configuration: one TOML document with `[policy]`, `[env]`, and
//! `[train]` sections, plus dotted-path flag overrides (`train.clip=0.15`).
//! Missing fields fall back to defaults via a recursive table merge.

use crate::env::{CurriculumCfg, EnvConfig, ObsKind, TaskKind};
use crate::error::{Error, Result};
use crate::policy::{Backbone, PolicyConfig};
use crate::registry::{benchmark_split, TaskEntry, SPLIT_NAMES};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "se")]
    Se,
    #[serde(rename = "me-mlp")]
    MeMlp,
    #[serde(rename = "me-tf")]
    MeTf,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Se => "se",
            AgentKind::MeMlp => "me-mlp",
            AgentKind::MeTf => "me-tf",
        }
    }
}

/// Optional per-field env overrides layered onto the task defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvOverride {
    pub horizon: Option<usize>,
    pub dt: Option<f64>,
    pub dq_max_revolute: Option<f64>,
    pub dq_max_prismatic: Option<f64>,
    pub reach_weights: Option<[f64; 4]>,
    pub push_weights: Option<[f64; 3]>,
    pub vicinity_threshold: Option<f64>,
    pub obs_kind: Option<ObsKind>,
    pub pointcloud_n: Option<usize>,
    pub curriculum: Option<CurriculumCfg>,
    pub n_goals: Option<usize>,
    pub goal_seed: Option<u64>,
}

impl EnvOverride {
    pub fn apply(&self, mut base: EnvConfig) -> EnvConfig {
        macro_rules! patch {
            ($($f:ident),*) => {
                $(if let Some(v) = self.$f.clone() { base.$f = v; })*
            };
        }
        patch!(
            horizon,
            dt,
            dq_max_revolute,
            dq_max_prismatic,
            reach_weights,
            push_weights,
            vicinity_threshold,
            obs_kind,
            pointcloud_n,
            curriculum,
            n_goals,
            goal_seed
        );
        base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Benchmark task name (arm3, panda, ee_arm, ee_task, prims, arms).
    pub benchmark: String,
    pub agent: AgentKind,
    /// Force every entry to this task kind; ee_task keeps its mix when unset.
    pub task_override: Option<TaskKind>,
    pub obstacles: bool,
    /// Training morphology for SE agents (name from the train split).
    pub se_morph: Option<String>,
    pub seed: u64,
    pub run_name: String,
    pub out_dir: PathBuf,
    /// Seed used to generate the benchmark split itself.
    pub registry_seed: u64,
    pub policy: PolicyConfig,
    pub env: EnvOverride,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: "arm3".into(),
            agent: AgentKind::Se,
            task_override: None,
            obstacles: false,
            se_morph: None,
            seed: 0,
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
            registry_seed: 0,
            policy: PolicyConfig::default(),
            env: EnvOverride::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Policy config with the agent kind's backbone and the env's action
    /// bounds applied.
    pub fn resolved_policy(&self) -> PolicyConfig {
        let mut p = self.policy.clone();
        match self.agent {
            AgentKind::MeMlp => p.backbone = Backbone::Mlp,
            AgentKind::MeTf => p.backbone = Backbone::Transformer,
            AgentKind::Se => {}
        }
        let env = self.env_config_for(TaskKind::Reach);
        p.dq_max_revolute = env.dq_max_revolute;
        p.dq_max_prismatic = env.dq_max_prismatic;
        p
    }

    /// Env config for one task kind under this run's overrides.
    pub fn env_config_for(&self, task: TaskKind) -> EnvConfig {
        let mut cfg = self.env.apply(EnvConfig::default_for(task));
        cfg.obstacles = self.obstacles;
        cfg
    }

    /// The morphologies this run trains on.
    pub fn resolve_entries(&self) -> Result<Vec<TaskEntry>> {
        let split = self.split()?;
        match self.agent {
            AgentKind::Se => {
                let entry = match &self.se_morph {
                    Some(name) => split
                        .train
                        .iter()
                        .find(|e| &e.morph.name == name)
                        .cloned()
                        .ok_or_else(|| {
                            Error::Config(format!("se_morph `{name}` not in the train split"))
                        })?,
                    None => split.train[0].clone(),
                };
                Ok(vec![entry])
            }
            AgentKind::MeMlp | AgentKind::MeTf => Ok(split.train),
        }
    }

    /// The benchmark split with the task override applied.
    pub fn split(&self) -> Result<crate::registry::BenchmarkTask> {
        let split = benchmark_split(&self.benchmark, self.registry_seed)?;
        Ok(match self.task_override {
            Some(task) => split.with_task_override(task),
            None => split,
        })
    }

    pub fn validate_sections(&self) -> Result<()> {
        self.train.validate()?;
        self.resolved_policy().validate()?;
        self.env_config_for(TaskKind::Reach).validate()?;
        self.env_config_for(TaskKind::Push).validate()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !SPLIT_NAMES.contains(&self.benchmark.as_str()) {
            return Err(Error::Config(format!(
                "unknown benchmark `{}`; expected one of {:?}",
                self.benchmark, SPLIT_NAMES
            )));
        }
        if self.run_name.is_empty() {
            return Err(Error::Config("run_name must not be empty".into()));
        }
        self.validate_sections()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }
}

fn merge_toml(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse a config file, layering the user document over defaults.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let user: toml::Value = toml::from_str(text).map_err(|e| Error::Parse {
        context: "run config".into(),
        message: e.to_string(),
    })?;
    let mut base = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("default config serialization: {e}")))?;
    merge_toml(&mut base, user);
    let cfg: RunConfig = base.try_into().map_err(|e| Error::Parse {
        context: "run config".into(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply `path.to.field=value` overrides (TOML literals on the right).
pub fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<()> {
    if overrides.is_empty() {
        return Ok(());
    }
    let mut value = toml::Value::try_from(cfg.clone())
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    for ov in overrides {
        let (path, raw) = ov.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{ov}` must look like path.to.field=value"))
        })?;
        let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
            .or_else(|_| toml::from_str(&format!("v = \"{raw}\"")))
            .map_err(|e| Error::Config(format!("bad override value `{raw}`: {e}")))?;
        let v = parsed.get("v").cloned().unwrap();

        let parts: Vec<&str> = path.trim().trim_start_matches("--").split('.').collect();
        fn set_path(slot: &mut toml::Value, parts: &[&str], v: toml::Value, full: &str) -> Result<()> {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{full}` does not address a table")))?;
            if parts.len() == 1 {
                table.insert(parts[0].to_string(), v);
                Ok(())
            } else {
                let next = table
                    .entry(parts[0].to_string())
                    .or_insert(toml::Value::Table(Default::default()));
                set_path(next, &parts[1..], v, full)
            }
        }
        set_path(&mut value, &parts, v, path)?;
    }
    let next: RunConfig = value.try_into().map_err(|e| Error::Parse {
        context: "run config override".into(),
        message: e.to_string(),
    })?;
    next.validate()?;
    *cfg = next;
    Ok(())
}
