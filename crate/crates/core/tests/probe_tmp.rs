use morphbench_core::config::{AgentKind, RunConfig};
use morphbench_core::eval::evaluate_detailed;
use morphbench_core::policy::{ActionHeadKind, Backbone, ValueTransform};
use morphbench_core::trainer::Trainer;

fn run_case(lr: f64, ent: f64, updates: usize, label: &'static str) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let mut run = RunConfig::default();
        run.benchmark = "arm3".into();
        run.agent = AgentKind::Se;
        run.policy.backbone = Backbone::Mlp;
        run.policy.action_head = ActionHeadKind::Discrete;
        run.policy.value_transform = ValueTransform::Symlog;
        run.train.n_envs = 128;
        run.train.rollout_t = 128;
        run.train.lr = lr;
        run.train.entropy_coef = ent;
        run.seed = 7;
        let mut t = Trainer::new(run.clone()).unwrap();
        let entry = t.entries[0].clone();
        let cfg = run.env_config_for(entry.task);
        for u in 1..=updates {
            t.update().unwrap();
            if u % 10 == 0 || u == updates {
                let (res, eps) =
                    evaluate_detailed(&t.net, &entry.morph, &cfg, 2000, run.seed, false).unwrap();
                let close = eps
                    .iter()
                    .filter(|e| e.final_dist.map(|d| d <= 0.10).unwrap_or(false))
                    .count();
                println!(
                    "[{label}] upd {u:>2} steps {:>7} score {:+.4} close {}/{}",
                    t.steps_done, res.score, close, eps.len()
                );
            }
        }
    })
}

#[test]
fn probe_lr() {
    let a = run_case(3e-4, 0.01, 40, "lr3e-4");
    let b = run_case(1e-3, 0.01, 40, "lr1e-3");
    a.join().unwrap();
    b.join().unwrap();
}
