//! One-shot evaluation on held-out tasks, the baselines, oracle pairing and the
//! trial-budget sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{expert_demo, rollout, Controller, ExpertConfig, ExpertController, Provenance, RandomController, TaskDataset};
use crate::mili::{
    collect_trials, improve_round, pretrain, IterationReport, MiliConfig, TrialStore,
};
use crate::policy::{embed, train, CurvePoint, LearnedController, ModelParams, NetworkConfig, Objective, TrainConfig};
use crate::seeding::{derive_seed, rng_for, stream};
use crate::world::{Family, Task, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bc,
    MetaImitation,
    Mili,
    MiliOraclePairing,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bc, Method::MetaImitation, Method::Mili, Method::MiliOraclePairing];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bc => "bc",
            Method::MetaImitation => "meta-imitation",
            Method::Mili => "mili",
            Method::MiliOraclePairing => "mili-oracle-pairing",
        }
    }
}

/// What drives the effector during evaluation.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    /// Learned policy conditioned on the embedded demo.
    Conditioned(&'a ModelParams),
    /// Learned policy with the embedding input held at zero.
    Unconditioned(&'a ModelParams),
    Expert,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: Task,
    pub episodes: usize,
    pub successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub seed: u64,
    pub overall: f64,
    pub per_family: BTreeMap<String, f64>,
    pub per_task: Vec<TaskEval>,
}

impl EvalResult {
    fn from_tasks(seed: u64, per_task: Vec<TaskEval>) -> Self {
        let mut fam: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let (mut s, mut n) = (0, 0);
        for t in &per_task {
            let e = fam.entry(t.task.family.name().to_string()).or_default();
            e.0 += t.successes;
            e.1 += t.episodes;
            s += t.successes;
            n += t.episodes;
        }
        EvalResult {
            seed,
            overall: if n == 0 { 0.0 } else { s as f64 / n as f64 },
            per_family: fam.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect(),
            per_task,
        }
    }

    pub fn family(&self, family: Family) -> Option<f64> {
        self.per_family.get(family.name()).copied()
    }
}

/// One-shot protocol: per episode an expert demo on one scene conditions the policy,
/// which is then scored on a different scene of the same task.
pub fn evaluate_one_shot(
    world: &World,
    agent: Agent<'_>,
    tasks: &[Task],
    episodes_per_task: usize,
    expert: &ExpertConfig,
    seed: u64,
) -> Result<EvalResult> {
    if episodes_per_task == 0 {
        return Err(Error::config("eval.episodes_per_task", "must be positive"));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (ti, task) in tasks.iter().enumerate() {
        let mut successes = 0;
        for ep in 0..episodes_per_task {
            let (demo, eval_scene) = episode_scenes(world, task, expert, seed, ti, ep)?;
            let mut rng = rng_for(seed, &[stream::EVAL, ti as u64, ep as u64, 2]);
            let out = match agent {
                Agent::Conditioned(p) => {
                    let e = embed(p, &demo)?;
                    run(world, &eval_scene, &mut LearnedController::new(p, e.values(), false)?, &mut rng)?
                }
                Agent::Unconditioned(p) => {
                    let zeros = vec![0.0; p.config.embed_dim];
                    run(world, &eval_scene, &mut LearnedController::new(p, &zeros, false)?, &mut rng)?
                }
                Agent::Expert => run(
                    world,
                    &eval_scene,
                    &mut ExpertController {
                        task: *task,
                        config: *expert,
                    },
                    &mut rng,
                )?,
                Agent::Random => run(world, &eval_scene, &mut RandomController, &mut rng)?,
            };
            successes += usize::from(world.check_success(&out.states, &eval_scene, task)?);
        }
        per_task.push(TaskEval {
            task: *task,
            episodes: episodes_per_task,
            successes,
        });
    }
    Ok(EvalResult::from_tasks(seed, per_task))
}

fn run(
    world: &World,
    scene: &crate::world::Scene,
    controller: &mut dyn Controller,
    rng: &mut crate::seeding::Rng,
) -> Result<crate::expert::Rollout> {
    rollout(world, scene, controller, rng)
}

/// The conditioning demo (with its scene) and a different evaluation scene.
pub fn episode_scenes(
    world: &World,
    task: &Task,
    expert: &ExpertConfig,
    seed: u64,
    task_index: usize,
    episode: usize,
) -> Result<(crate::expert::Trajectory, crate::world::Scene)> {
    let demo_seed = derive_seed(seed, &[stream::EVAL, task_index as u64, episode as u64, 0]);
    let demo = expert_demo(world, task, expert, demo_seed, &[])?.trajectory;
    let mut rng = rng_for(seed, &[stream::EVAL, task_index as u64, episode as u64, 1]);
    loop {
        let scene = world.sample_scene_with(task, &mut rng)?;
        if scene != demo.scene {
            return Ok((demo, scene));
        }
    }
}

/// Behavior cloning on all demos pooled, with the embedding input held at zero.
pub fn run_baseline_bc(
    world: &World,
    datasets: &[TaskDataset],
    network: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<CurvePoint>)> {
    let mut params = ModelParams::init(*network, world.obs_dim(), &mut rng_for(seed, &[stream::INIT]))?;
    let curve = train(&mut params, datasets, Objective::Bc, cfg, derive_seed(seed, &[stream::BC]))?;
    Ok((params, curve))
}

/// Meta-imitation on the demonstrations alone: exactly the pretraining stage.
pub fn run_baseline_meta(
    world: &World,
    datasets: &[TaskDataset],
    network: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<CurvePoint>)> {
    pretrain(world, datasets, network, cfg, seed)
}

/// Groups stored trials by the tasks they actually achieved (hidden labels). Every
/// group of two or more becomes a dataset; with `pairs_only`, groups are instead
/// split into consecutive disjoint pairs.
pub fn oracle_pairing(store: &TrialStore, pairs_only: bool) -> Vec<TaskDataset> {
    let mut groups: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    let mut records: Vec<_> = store.records().iter().collect();
    records.sort_by_key(|r| r.id);
    for (i, r) in records.iter().enumerate() {
        for t in r.filter.oracle_achieved() {
            groups.entry(*t).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (task, members) in groups {
        if members.len() < 2 {
            continue;
        }
        let chunks: Vec<Vec<usize>> = if pairs_only {
            members.chunks_exact(2).map(|c| c.to_vec()).collect()
        } else {
            vec![members]
        };
        for c in chunks {
            out.push(TaskDataset {
                task: Some(task),
                demos: c.iter().map(|&i| Arc::clone(&records[i].trajectory)).collect(),
                provenance: Provenance::PairedTrial,
            });
        }
    }
    out
}

/// Retrains `params` on the demos plus oracle-grouped trials, exactly as MILI would
/// on its learned pairs. Returns the parameters and the number of oracle datasets.
pub fn retrain_with_oracle(
    world: &World,
    params: &ModelParams,
    demos: &[TaskDataset],
    store: &TrialStore,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<(ModelParams, usize)> {
    let oracle = oracle_pairing(store, cfg.oracle_pairs_only);
    if oracle.is_empty() {
        return Ok((params.clone(), 0));
    }
    let p = crate::mili::retrain(world, params, demos, &oracle, &cfg.mili.retrain, derive_seed(seed, &[0]))?.0;
    Ok((p, oracle.len()))
}

pub fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One-sided sign test for `a > b` over paired samples. Ties are dropped. Returns
/// `(wins, trials, p-value)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    (wins, n, p.min(1.0))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// All methods for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub results: BTreeMap<Method, EvalResult>,
    pub mili: IterationReport,
    pub oracle_datasets: usize,
    pub bc_curve: Vec<CurvePoint>,
    pub pretrain_curve: Vec<CurvePoint>,
    /// `(budget, overall success)`; budget 0 is meta-imitation.
    pub sweep: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub network: NetworkConfig,
    pub pretrain: TrainConfig,
    pub bc: TrainConfig,
    pub mili: MiliConfig,
    pub expert: ExpertConfig,
    pub demos_per_task: usize,
    pub episodes_per_task: usize,
    /// Trial budgets for the sweep; `mili.trials` is always evaluated.
    pub budgets: Vec<usize>,
    pub oracle_pairs_only: bool,
}

/// Runs every method on one world seed. Pretraining and the trial prefix are shared:
/// trial `i` depends only on `(seed, i)`, so each budget's trials are a prefix of the
/// largest budget's.
pub fn compare_seed(world: &World, tasks: &crate::world::TaskSets, cfg: &BenchConfig, seed: u64) -> Result<SeedComparison> {
    let demos = crate::expert::collect_demos(world, &tasks.train, cfg.demos_per_task, &cfg.expert, seed)?;
    let eval = |agent: Agent<'_>| {
        evaluate_one_shot(world, agent, &tasks.test, cfg.episodes_per_task, &cfg.expert, derive_seed(seed, &[stream::EVAL]))
    };
    let (bc, bc_curve) = run_baseline_bc(world, &demos, &cfg.network, &cfg.bc, seed)?;
    let mut results = BTreeMap::new();
    results.insert(Method::Bc, eval(Agent::Unconditioned(&bc))?);

    let (meta, pretrain_curve) = run_baseline_meta(world, &demos, &cfg.network, &cfg.pretrain, seed)?;
    let meta_eval = eval(Agent::Conditioned(&meta))?;
    let meta_overall = meta_eval.overall;
    results.insert(Method::MetaImitation, meta_eval);

    let mut budgets: Vec<usize> = cfg.budgets.iter().copied().chain([cfg.mili.trials]).filter(|&b| b > 0).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = budgets.last().copied().unwrap_or(0);
    let collect_seed = derive_seed(seed, &[stream::COLLECT, 0]);
    let trials = collect_trials(world, &meta, &demos, max_budget, collect_seed)?;

    let mut sweep = vec![(0, meta_overall)];
    let mut mili_report = None;
    let mut oracle_datasets = 0;
    for &b in &budgets {
        let mut store = TrialStore::new();
        let mut paired = Vec::new();
        let round_cfg = MiliConfig { trials: b, ..cfg.mili };
        let (p, report) = improve_round(world, &meta, &demos, &trials[..b], &mut store, &mut paired, &round_cfg, 0, seed)?;
        let r = eval(Agent::Conditioned(&p))?;
        sweep.push((b, r.overall));
        if b == cfg.mili.trials {
            results.insert(Method::Mili, r);
            mili_report = Some(report);
            let (op, n) = retrain_with_oracle(world, &meta, &demos, &store, cfg, seed)?;
            oracle_datasets = n;
            results.insert(Method::MiliOraclePairing, eval(Agent::Conditioned(&op))?);
        }
    }
    if cfg.mili.trials == 0 {
        results.insert(Method::Mili, results[&Method::MetaImitation].clone());
        results.insert(Method::MiliOraclePairing, results[&Method::MetaImitation].clone());
    }
    Ok(SeedComparison {
        seed,
        results,
        mili: mili_report.unwrap_or_default(),
        oracle_datasets,
        bc_curve,
        pretrain_curve,
        sweep,
    })
}
