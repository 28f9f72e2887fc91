//! Evaluation: task scores, random-agent baselines, and report emission.
//!
//! Reach is scored by the mean per-step task reward (EE-goal distance penalty
//! plus vicinity bonus, unweighted), reported relative to a random agent that
//! shares the evaluation seed. Push is scored by the success rate over
//! completed episodes. The push threshold is fixed at its final value during
//! evaluation; no curriculum applies.

use crate::env::{Env, EnvConfig, TaskKind};
use crate::error::{Error, Result};
use crate::morphology::Morphology;
use crate::policy::{sample_action, PolicyNet, SampleMode};
use crate::util::{fnv1a, mix_seed, seed_stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub morphology: String,
    pub task: TaskKind,
    pub steps: usize,
    pub episodes: usize,
    /// Mean per-step raw task reward (reach) or mean per-step weighted reward
    /// (push).
    pub raw_mean: f64,
    pub baseline_mean: f64,
    /// Relative score (reach) or success rate (push).
    pub score: f64,
    /// Fraction of completed episodes ending in success.
    pub success_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeRecord {
    pub final_dist: Option<f64>,
    pub success: bool,
    pub reward: f64,
}

enum Actor<'a> {
    Policy(&'a PolicyNet, SampleMode),
    Random,
}

struct RunOutcome {
    raw_mean: f64,
    success_rate: f64,
    episodes: usize,
    records: Vec<EpisodeRecord>,
}

fn run_actor(
    actor: &Actor<'_>,
    morph: &Morphology,
    cfg: &EnvConfig,
    steps: usize,
    seed: u64,
) -> Result<RunOutcome> {
    let mut env = Env::new(morph.clone(), cfg.clone(), seed)?;
    env.set_progress(1.0); // final threshold; no curriculum at eval
    let mut rng = seed_stream(seed, &[0xEAC7]);
    let mut obs = env.reset()?;

    let mut raw_sum = 0.0;
    let mut records: Vec<EpisodeRecord> = Vec::new();
    let mut ep = EpisodeRecord::default();

    for _ in 0..steps {
        let action: Vec<f64> = match actor {
            Actor::Policy(net, mode) => {
                let out = net.forward(&[&obs])?;
                sample_action(&out[0].dist, *mode, &mut rng).0
            }
            Actor::Random => env
                .morph
                .joints
                .iter()
                .map(|j| {
                    if j.is_movable() {
                        let b = cfg.dq_max_for(j.kind);
                        rng.gen_range(-b..=b)
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let r = env.step(&action)?;

        raw_sum += match cfg.task {
            TaskKind::Reach => {
                let mut task_r = 0.0;
                for (name, v) in &r.reward_terms {
                    if *name == "ee_goal" || *name == "vicinity" {
                        task_r += v;
                    }
                }
                task_r
            }
            TaskKind::Push => r.reward,
        };
        ep.reward += r.reward;
        if let Some(d) = r.info.ee_goal_dist {
            ep.final_dist = Some(d);
        }
        ep.success = r.info.success;

        if r.terminated || r.truncated {
            records.push(std::mem::take(&mut ep));
            obs = env.reset()?;
        } else {
            obs = r.observation;
        }
    }

    let episodes = records.len();
    let successes = records.iter().filter(|e| e.success).count();
    Ok(RunOutcome {
        raw_mean: raw_sum / steps.max(1) as f64,
        success_rate: if episodes > 0 {
            successes as f64 / episodes as f64
        } else {
            0.0
        },
        episodes,
        records,
    })
}

fn env_cfg_hash(cfg: &EnvConfig) -> u64 {
    fnv1a(serde_json::to_string(cfg).expect("env cfg json").as_bytes())
}

static BASELINE_CACHE: Mutex<BTreeMap<(u64, u64, usize, u64), (f64, f64)>> =
    Mutex::new(BTreeMap::new());

/// Mean task reward (and success rate) of the uniform-random agent; cached
/// per (morphology, env config, steps, seed).
pub fn random_baseline(
    morph: &Morphology,
    cfg: &EnvConfig,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let key = (morph.stable_hash(), env_cfg_hash(cfg), steps, seed);
    if let Some(hit) = BASELINE_CACHE.lock().unwrap().get(&key) {
        return Ok(*hit);
    }
    let out = run_actor(&Actor::Random, morph, cfg, steps, seed)?;
    let entry = (out.raw_mean, out.success_rate);
    BASELINE_CACHE.lock().unwrap().insert(key, entry);
    Ok(entry)
}

/// Evaluate a policy on one morphology. Deterministic action mode unless
/// `stochastic`; the random baseline shares the evaluation seed.
pub fn evaluate(
    net: &PolicyNet,
    morph: &Morphology,
    cfg: &EnvConfig,
    steps: usize,
    seed: u64,
    stochastic: bool,
) -> Result<EvalResult> {
    let (result, _) = evaluate_detailed(net, morph, cfg, steps, seed, stochastic)?;
    Ok(result)
}

/// Like [`evaluate`] but also returns per-episode records.
pub fn evaluate_detailed(
    net: &PolicyNet,
    morph: &Morphology,
    cfg: &EnvConfig,
    steps: usize,
    seed: u64,
    stochastic: bool,
) -> Result<(EvalResult, Vec<EpisodeRecord>)> {
    let eval_seed = mix_seed(seed, &[0xEA1, morph.stable_hash()]);
    let mode = if stochastic {
        SampleMode::Stochastic
    } else {
        SampleMode::Deterministic
    };
    let agent = run_actor(&Actor::Policy(net, mode), morph, cfg, steps, eval_seed)?;
    let (baseline_raw, _baseline_success) = random_baseline(morph, cfg, steps, eval_seed)?;

    let score = match cfg.task {
        TaskKind::Reach => agent.raw_mean - baseline_raw,
        TaskKind::Push => agent.success_rate,
    };
    Ok((
        EvalResult {
            morphology: morph.name.clone(),
            task: cfg.task,
            steps,
            episodes: agent.episodes,
            raw_mean: agent.raw_mean,
            baseline_mean: baseline_raw,
            score,
            success_rate: agent.success_rate,
        },
        agent.records,
    ))
}

/// Mean score over training morphologies.
pub fn mt_score(results: &[EvalResult]) -> Result<f64> {
    mean_score(results)
}

/// Mean score over held-out morphologies.
pub fn zs_score(results: &[EvalResult]) -> Result<f64> {
    mean_score(results)
}

fn mean_score(results: &[EvalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Env("empty evaluation result set".into()));
    }
    Ok(results.iter().map(|r| r.score).sum::<f64>() / results.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub run: String,
    pub agent: String,
    pub task: String,
}

/// Write `report.csv`, `summary.json`, and per-morphology plot-data files
/// (step vs score, extracted from `metrics.csv` when present). Deterministic:
/// re-emitting identical inputs produces identical bytes.
pub fn emit_report(
    meta: &ReportMeta,
    train: &[EvalResult],
    test: &[EvalResult],
    metrics_csv: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut report = String::from("run,agent_kind,task,split,morphology,score,episodes,steps\n");
    for (split, rows) in [("train", train), ("test", test)] {
        for r in rows {
            report.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                meta.run, meta.agent, meta.task, split, r.morphology, r.score, r.episodes, r.steps
            ));
        }
    }
    std::fs::write(out_dir.join("report.csv"), report)?;

    let mt = if train.is_empty() { None } else { Some(mt_score(train)?) };
    let zs = if test.is_empty() { None } else { Some(zs_score(test)?) };
    let summary = serde_json::json!({
        "agent": meta.agent,
        "task": meta.task,
        "MT": mt,
        "ZS": zs,
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(out_dir.join("summary.json"), text)?;

    if let Some(csv) = metrics_csv {
        if csv.exists() {
            let content = std::fs::read_to_string(csv)?;
            let mut series: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
            for line in content.lines().skip(1) {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() < 6 {
                    continue;
                }
                let step: u64 = fields[0].parse().unwrap_or(0);
                let morph = fields[1].to_string();
                let score: f64 = fields[5].parse().unwrap_or(f64::NAN);
                series.entry(morph).or_default().push((step, score));
            }
            for (morph, points) in series {
                let mut data = String::new();
                for (x, y) in points {
                    data.push_str(&format!("{} {}\n", x, y));
                }
                std::fs::write(out_dir.join(format!("plot_{morph}.dat")), data)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_reach_goals;
    use crate::policy::{ActionHeadKind, PolicyConfig};
    use crate::procgen::{gen_arm3, GenParams};
    use crate::scene::Scene;

    fn small_cfg() -> EnvConfig {
        let mut cfg = EnvConfig::default_for(TaskKind::Reach);
        cfg.horizon = 20;
        cfg.n_goals = 5;
        cfg
    }

    #[test]
    fn random_agent_scores_zero_against_itself() {
        let m = gen_arm3(&GenParams::with_seed(3)).unwrap();
        let cfg = small_cfg();
        let seed = mix_seed(7, &[0xEA1, m.stable_hash()]);
        let (a, _) = random_baseline(&m, &cfg, 400, seed).unwrap();
        let (b, _) = random_baseline(&m, &cfg, 400, seed).unwrap();
        assert_eq!(a, b); // cache + determinism: relative score would be 0
    }

    #[test]
    fn different_seeds_give_different_baselines() {
        let m = gen_arm3(&GenParams::with_seed(3)).unwrap();
        let cfg = small_cfg();
        let a = random_baseline(&m, &cfg, 400, 1).unwrap();
        let b = random_baseline(&m, &cfg, 400, 2).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn baseline_raw_reward_bounded_by_vicinity_rate() {
        // raw = mean(-dist) + mean(vicinity) <= per-step vicinity hit rate.
        let m = gen_arm3(&GenParams::with_seed(4)).unwrap();
        let cfg = small_cfg();
        let mut env = Env::new(m.clone(), cfg.clone(), 5).unwrap();
        let mut rng = seed_stream(5, &[0xBB]);
        env.reset().unwrap();
        let steps = 600;
        let mut raw = 0.0;
        let mut vicinity_hits = 0.0;
        for _ in 0..steps {
            let action: Vec<f64> = m
                .joints
                .iter()
                .map(|j| {
                    if j.is_movable() {
                        let b = cfg.dq_max_for(j.kind);
                        rng.gen_range(-b..=b)
                    } else {
                        0.0
                    }
                })
                .collect();
            let r = env.step(&action).unwrap();
            for (name, v) in &r.reward_terms {
                if *name == "ee_goal" {
                    raw += v;
                }
                if *name == "vicinity" {
                    raw += v;
                    vicinity_hits += v;
                }
            }
            if r.terminated || r.truncated {
                env.reset().unwrap();
            }
        }
        assert!(raw / steps as f64 <= vicinity_hits / steps as f64 + 1e-12);
    }

    #[test]
    fn oracle_policy_holding_at_goal_scores_one_raw() {
        // A 0-delta policy on an env whose only goal is the home EE position:
        // distance stays 0, vicinity 1 every step.
        let m = gen_arm3(&GenParams::with_seed(5)).unwrap();
        let cfg = small_cfg();
        let scene = Scene::build(&m, false, cfg.goal_seed).unwrap();
        let home_goal = crate::kinematics::ee_position(&m, &m.home_config(), &scene.mount).unwrap();

        let mut env = Env::new(m.clone(), cfg.clone(), 3).unwrap();
        env.override_goals(vec![home_goal]);
        let mut raw = 0.0;
        let steps = 100;
        env.reset().unwrap();
        for _ in 0..steps {
            let r = env.step(&vec![0.0; m.n_joints()]).unwrap();
            for (name, v) in &r.reward_terms {
                if *name == "ee_goal" || *name == "vicinity" {
                    raw += v;
                }
            }
            if r.terminated || r.truncated {
                env.reset().unwrap();
            }
        }
        assert!((raw / steps as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn never_moving_push_policy_has_zero_success() {
        let m = gen_arm3(&GenParams::with_seed(6)).unwrap();
        let mut cfg = EnvConfig::default_for(TaskKind::Push);
        cfg.horizon = 10;
        let net = PolicyNet::new(
            PolicyConfig {
                action_head: ActionHeadKind::Discrete,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        // Freshly initialized net barely moves; success requires crossing y=0.2.
        let (res, _) = evaluate_detailed(&net, &m, &cfg, 200, 0, false).unwrap();
        assert_eq!(res.success_rate, 0.0);
        assert_eq!(res.score, 0.0);
        assert_eq!(res.steps, 200);
    }

    #[test]
    fn goal_generation_within_workspace() {
        let m = gen_arm3(&GenParams::with_seed(9)).unwrap();
        let scene = Scene::build(&m, false, 0).unwrap();
        let goals = sample_reach_goals(&m, &scene, 100, 0).unwrap();
        assert_eq!(goals.len(), 100);
        let radius = crate::procgen::chain_length(&m);
        for g in goals {
            let d = crate::math::vdist(g, [0.0, 0.0, crate::procgen::PLANE_Z]);
            assert!(d <= radius + 1e-9);
        }
    }

    #[test]
    fn report_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ReportMeta {
            run: "t".into(),
            agent: "se".into(),
            task: "arm3".into(),
        };
        let rows = vec![EvalResult {
            morphology: "m0".into(),
            task: TaskKind::Reach,
            steps: 100,
            episodes: 5,
            raw_mean: -0.25,
            baseline_mean: -0.5,
            score: 0.25,
            success_rate: 0.2,
        }];
        emit_report(&meta, &rows, &[], None, dir.path()).unwrap();
        let a = std::fs::read(dir.path().join("report.csv")).unwrap();
        let s1 = std::fs::read(dir.path().join("summary.json")).unwrap();
        emit_report(&meta, &rows, &[], None, dir.path()).unwrap();
        let b = std::fs::read(dir.path().join("report.csv")).unwrap();
        let s2 = std::fs::read(dir.path().join("summary.json")).unwrap();
        assert_eq!(a, b);
        assert_eq!(s1, s2);
        let summary: serde_json::Value = serde_json::from_slice(&s1).unwrap();
        let obj = summary.as_object().unwrap();
        let keys: Vec<&String> = obj.keys().collect();
        assert_eq!(keys.len(), 4);
        for k in ["agent", "task", "MT", "ZS"] {
            assert!(obj.contains_key(k));
        }
    }
}
