//! Experiment stages as resumable steps over a run directory.
//!
//! Every stage writes its artifacts under `<output_dir>/seed-<seed>/` plus a
//! `<stage>.manifest.json` recording the config hash, seed, input and output file
//! hashes and wall time. A stage refuses inputs whose producing manifest carries a
//! different config hash, or whose bytes no longer match the recorded hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalbench::{
    evaluate_one_shot, retrain_with_oracle, run_baseline_bc, run_baseline_meta, Agent, EvalResult, Method,
};
use crate::expert::{collect_demos, TaskDataset};
use crate::metrics::{emit_metrics, SeedMetrics};
use crate::mili::{collect_trials, improve_round, run_mili_from, IterationReport, MiliConfig, TrialStore};
use crate::persist::{file_hash, index_path, load_checkpoint, load_trajectories, save_checkpoint, save_trajectories};
use crate::policy::{CurvePoint, ModelParams};
use crate::seeding::{derive_seed, stream};
use crate::world::{TaskSets, Vocabulary, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenTasks,
    CollectDemos,
    Pretrain,
    Improve,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenTasks => "gen-tasks",
            Stage::CollectDemos => "collect-demos",
            Stage::Pretrain => "pretrain",
            Stage::Improve => "improve",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

pub const TASKS_FILE: &str = "tasks.json";
pub const DEMOS_FILE: &str = "demos.trj";
pub const META_CKPT: &str = "meta.ckpt";
pub const BC_CKPT: &str = "bc.ckpt";
pub const CURVES_FILE: &str = "curves.json";
pub const MILI_CKPT: &str = "mili.ckpt";
pub const ORACLE_CKPT: &str = "oracle.ckpt";
pub const PAIRED_FILE: &str = "paired.trj";
pub const IMPROVE_FILE: &str = "improve.json";
pub const EVAL_FILE: &str = "eval.json";
pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub vocab: Vocabulary,
    pub tasks: TaskSets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub bc: Vec<CurvePoint>,
    pub pretrain: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImproveFile {
    pub iterations: Vec<IterationReport>,
    pub oracle_datasets: usize,
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

fn manifest_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.manifest.json", stage.name()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.column() as u64,
        reason: e.to_string(),
    })
}

/// Bookkeeping for one stage invocation on one directory.
struct StageRun<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    dir: PathBuf,
    seed: Option<u64>,
    stage: Stage,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl<'a> StageRun<'a> {
    fn new(cfg: &'a ExperimentConfig, dir: PathBuf, seed: Option<u64>, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("{} (seed {seed:?}) in {}", stage.name(), dir.display());
        Ok(StageRun {
            cfg,
            hash: cfg.hash(),
            dir,
            seed,
            stage,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    /// Path of `file` as produced by `producer`, after checking that producer's
    /// manifest belongs to this config and still describes the file's bytes.
    fn input(&mut self, producer: Stage, file: &str) -> Result<PathBuf> {
        let path = self.dir.join(file);
        let mpath = manifest_path(&self.dir, producer);
        if !mpath.exists() || !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: producer.name().to_string(),
            });
        }
        let manifest: Manifest = read_json(&mpath)?;
        if manifest.config_hash != self.hash {
            return Err(Error::StaleInput {
                path: mpath,
                expected: self.hash.clone(),
                found: manifest.config_hash,
            });
        }
        let recorded = manifest
            .outputs
            .iter()
            .find(|f| f.path == file)
            .ok_or_else(|| Error::MissingArtifact {
                path: path.clone(),
                stage: producer.name().to_string(),
            })?;
        let actual = file_hash(&path)?;
        if actual != recorded.sha256 {
            return Err(Error::StaleInput {
                path,
                expected: recorded.sha256.clone(),
                found: actual,
            });
        }
        self.inputs.push(recorded.clone());
        Ok(path)
    }

    fn has(&self, producer: Stage) -> bool {
        manifest_path(&self.dir, producer).exists()
    }

    fn output(&mut self, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self) -> Result<Manifest> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned(),
                    sha256: file_hash(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            stage: self.stage.name().to_string(),
            config_hash: self.hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        write_json(&manifest_path(&self.dir, self.stage), &m)?;
        Ok(m)
    }

    fn world(&self) -> Result<World> {
        World::new(self.cfg.world.clone(), self.seed.expect("seeded stage"))
    }

    fn tasks(&mut self, world: &World) -> Result<TaskSets> {
        let path = self.input(Stage::GenTasks, TASKS_FILE)?;
        let file: TaskFile = read_json(&path)?;
        if file.vocab != world.vocab {
            return Err(Error::StaleInput {
                path,
                expected: "vocabulary of this world seed".into(),
                found: "a different vocabulary".into(),
            });
        }
        Ok(file.tasks)
    }

    fn demos(&mut self, world: &World) -> Result<Vec<TaskDataset>> {
        let path = self.input(Stage::CollectDemos, DEMOS_FILE)?;
        self.inputs.push(FileHash {
            path: format!("{DEMOS_FILE}.index.json"),
            sha256: file_hash(&index_path(&path))?,
        });
        load_trajectories(&path, world.obs_dim(), Some(&self.hash))
    }

    fn checkpoint(&mut self, producer: Stage, file: &str) -> Result<ModelParams> {
        let path = self.input(producer, file)?;
        load_checkpoint(&path, Some(&self.hash))
    }
}

pub fn gen_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let mut run = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::GenTasks)?;
    let world = run.world()?;
    let tasks = TaskSets::generate(&world.config, &world.vocab, seed)?;
    let out = run.output(TASKS_FILE);
    write_json(
        &out,
        &TaskFile {
            vocab: world.vocab.clone(),
            tasks,
        },
    )?;
    run.finish()
}

pub fn collect_demo_stage(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let mut run = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::CollectDemos)?;
    let world = run.world()?;
    let tasks = run.tasks(&world)?;
    let demos = collect_demos(&world, &tasks.train, cfg.demos_per_task, &cfg.expert, seed)?;
    let out = run.output(DEMOS_FILE);
    save_trajectories(&out, &demos, world.obs_dim(), &run.hash)?;
    run.outputs.push(index_path(&out));
    run.finish()
}

pub fn pretrain_stage(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let mut run = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::Pretrain)?;
    let world = run.world()?;
    let demos = run.demos(&world)?;
    let (meta, pretrain) = run_baseline_meta(&world, &demos, &cfg.network, &cfg.pretrain, seed)?;
    let (bc, bc_curve) = run_baseline_bc(&world, &demos, &cfg.network, &cfg.bc, seed)?;
    save_checkpoint(&run.output(META_CKPT), &meta, &run.hash)?;
    save_checkpoint(&run.output(BC_CKPT), &bc, &run.hash)?;
    write_json(&run.output(CURVES_FILE), &Curves { bc: bc_curve, pretrain })?;
    run.finish()
}

/// Collect, filter, pair and retrain from the pretrained checkpoint, plus the same
/// retraining on oracle-grouped trials.
pub fn improve_stage(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let mut run = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::Improve)?;
    let world = run.world()?;
    let demos = run.demos(&world)?;
    let meta = run.checkpoint(Stage::Pretrain, META_CKPT)?;
    let outcome = run_mili_from(&world, &meta, &demos, &cfg.mili, seed)?;
    let (oracle, oracle_datasets) = retrain_with_oracle(&world, &meta, &demos, &outcome.store, &cfg.bench(), seed)?;
    save_checkpoint(&run.output(MILI_CKPT), &outcome.params, &run.hash)?;
    save_checkpoint(&run.output(ORACLE_CKPT), &oracle, &run.hash)?;
    let paired = run.output(PAIRED_FILE);
    save_trajectories(&paired, &outcome.paired, world.obs_dim(), &run.hash)?;
    run.outputs.push(index_path(&paired));
    write_json(
        &run.output(IMPROVE_FILE),
        &ImproveFile {
            iterations: outcome.report.iterations,
            oracle_datasets,
        },
    )?;
    run.finish()
}

fn evaluate(cfg: &ExperimentConfig, world: &World, tasks: &TaskSets, agent: Agent<'_>, seed: u64) -> Result<EvalResult> {
    evaluate_one_shot(
        world,
        agent,
        &tasks.test,
        cfg.eval.episodes_per_task,
        &cfg.expert,
        derive_seed(seed, &[stream::EVAL]),
    )
}

/// One-shot evaluation on the test tasks of every method whose checkpoint exists.
pub fn eval_stage(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let mut run = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::Eval)?;
    let world = run.world()?;
    let tasks = run.tasks(&world)?;
    let mut results = BTreeMap::new();
    let bc = run.checkpoint(Stage::Pretrain, BC_CKPT)?;
    results.insert(Method::Bc, evaluate(cfg, &world, &tasks, Agent::Unconditioned(&bc), seed)?);
    let meta = run.checkpoint(Stage::Pretrain, META_CKPT)?;
    results.insert(Method::MetaImitation, evaluate(cfg, &world, &tasks, Agent::Conditioned(&meta), seed)?);
    if run.has(Stage::Improve) {
        let mili = run.checkpoint(Stage::Improve, MILI_CKPT)?;
        results.insert(Method::Mili, evaluate(cfg, &world, &tasks, Agent::Conditioned(&mili), seed)?);
        let oracle = run.checkpoint(Stage::Improve, ORACLE_CKPT)?;
        results.insert(Method::MiliOraclePairing, evaluate(cfg, &world, &tasks, Agent::Conditioned(&oracle), seed)?);
    }
    write_json(&run.output(EVAL_FILE), &results)?;
    run.finish()
}

/// Success after one improvement round at each budget. Trials for smaller budgets
/// are prefixes of the largest budget's trials.
pub fn sweep_stage(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let mut run = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::Sweep)?;
    let world = run.world()?;
    let tasks = run.tasks(&world)?;
    let demos = run.demos(&world)?;
    let meta = run.checkpoint(Stage::Pretrain, META_CKPT)?;
    let mut curve = vec![(0, evaluate(cfg, &world, &tasks, Agent::Conditioned(&meta), seed)?.overall)];
    let max = cfg.eval.budgets.iter().copied().max().unwrap_or(0);
    let trials = collect_trials(&world, &meta, &demos, max, derive_seed(seed, &[stream::COLLECT, 0]))?;
    for &b in cfg.eval.budgets.iter().filter(|&&b| b > 0) {
        let round = MiliConfig { trials: b, ..cfg.mili };
        let (p, _) = improve_round(&world, &meta, &demos, &trials[..b], &mut TrialStore::new(), &mut Vec::new(), &round, 0, seed)?;
        curve.push((b, evaluate(cfg, &world, &tasks, Agent::Conditioned(&p), seed)?.overall));
    }
    write_json(&run.output(SWEEP_FILE), &curve)?;
    run.finish()
}

/// Aggregates every seed's results into the metrics tables in the output directory.
pub fn report_stage(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Manifest> {
    if seeds.is_empty() {
        return Err(Error::config("eval.seeds", "report needs at least one seed"));
    }
    let mut run = StageRun::new(cfg, cfg.output_dir.clone(), None, Stage::Report)?;
    let mut all = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut sr = StageRun::new(cfg, seed_dir(cfg, seed), Some(seed), Stage::Report)?;
        let results: BTreeMap<Method, EvalResult> = read_json(&sr.input(Stage::Eval, EVAL_FILE)?)?;
        let curves: Curves = read_json(&sr.input(Stage::Pretrain, CURVES_FILE)?)?;
        let sweep: Vec<(usize, f64)> = if sr.has(Stage::Sweep) {
            read_json(&sr.input(Stage::Sweep, SWEEP_FILE)?)?
        } else {
            Vec::new()
        };
        let improve: Option<ImproveFile> = if sr.has(Stage::Improve) {
            Some(read_json(&sr.input(Stage::Improve, IMPROVE_FILE)?)?)
        } else {
            None
        };
        let mut named = vec![("bc".to_string(), curves.bc), ("pretrain".to_string(), curves.pretrain)];
        if let Some(r) = improve.as_ref().and_then(|i| i.iterations.first()) {
            if !r.retrain_curve.is_empty() {
                named.push(("retrain".to_string(), r.retrain_curve.clone()));
            }
        }
        let prefix = format!("seed-{seed}/");
        run.inputs.extend(sr.inputs.into_iter().map(|f| FileHash {
            path: format!("{prefix}{}", f.path),
            ..f
        }));
        all.push(SeedMetrics {
            seed,
            results,
            sweep,
            pairing: improve.and_then(|i| i.iterations.into_iter().next()),
            curves: named,
        });
    }
    for p in emit_metrics(&cfg.output_dir, &all, cfg.mili.alpha)? {
        run.outputs.push(p);
    }
    run.finish()
}

/// Every per-seed stage in order, then the report.
pub fn run_all(cfg: &ExperimentConfig, seeds: &[u64], sweep: bool) -> Result<Manifest> {
    for &seed in seeds {
        gen_tasks(cfg, seed)?;
        collect_demo_stage(cfg, seed)?;
        pretrain_stage(cfg, seed)?;
        improve_stage(cfg, seed)?;
        eval_stage(cfg, seed)?;
        if sweep {
            sweep_stage(cfg, seed)?;
        }
    }
    report_stage(cfg, seeds)
}
