//! The improvement loop: pretrain on demonstrations, collect trials with the
//! meta-policy, keep the useful ones, pair them in embedding space and retrain.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{rollout, Controller, Provenance, TaskDataset, Trajectory};
use crate::policy::{embed, train, CurvePoint, Embedding, LearnedController, ModelParams, NetworkConfig, Objective, TrainConfig};
use crate::seeding::{derive_seed, rng_for, stream};
use crate::world::{FilterResult, Scene, Task, World, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    /// Re-initialize parameters instead of continuing from the pretrained ones.
    pub from_scratch: bool,
    /// Keep the contrastive term during retraining.
    pub include_contrastive: bool,
    pub train: TrainConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            from_scratch: false,
            include_contrastive: false,
            train: TrainConfig {
                steps: 1_000,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiliConfig {
    pub alpha: f64,
    pub trials: usize,
    pub iterations: usize,
    /// Most pairs any one trial may join; `None` = unlimited.
    pub pair_cap: Option<usize>,
    pub retrain: RetrainConfig,
}

impl Default for MiliConfig {
    fn default() -> Self {
        MiliConfig {
            alpha: 0.9,
            trials: 2_000,
            iterations: 1,
            pair_cap: None,
            retrain: RetrainConfig::default(),
        }
    }
}

impl MiliConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > -1.0 && self.alpha <= 1.0) {
            return Err(Error::config("mili.alpha", "must lie in (-1, 1]"));
        }
        if self.pair_cap == Some(0) {
            return Err(Error::config("mili.pair_cap", "must be positive when set"));
        }
        self.retrain.train.validate("mili.retrain.train")
    }
}

/// An autonomously collected episode before filtering.
#[derive(Clone, Debug)]
pub struct Trial {
    pub index: usize,
    pub trajectory: Arc<Trajectory>,
    pub states: Vec<WorldState>,
    /// `(dataset, demo)` the policy was conditioned on.
    pub conditioning: (usize, usize),
    pub task: Task,
}

impl Trial {
    pub fn scene(&self) -> &Scene {
        &self.trajectory.scene
    }
}

#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub id: usize,
    pub trajectory: Arc<Trajectory>,
    pub conditioning: (usize, usize),
    pub filter: FilterResult,
}

/// Append-only store of trials that passed the filter, with embeddings cached per
/// parameter fingerprint.
#[derive(Clone, Debug, Default)]
pub struct TrialStore {
    records: Vec<TrialRecord>,
    cache: Option<(u64, Vec<Embedding>)>,
}

impl TrialStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    /// Appends a record. Records that failed the filter are refused.
    pub fn push(&mut self, record: TrialRecord) -> Result<()> {
        if !record.filter.useful {
            return Err(Error::InvalidTensor(format!("trial {} did not pass the filter", record.id)));
        }
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::InvalidTensor(format!("duplicate trial id {}", record.id)));
        }
        self.records.push(record);
        self.cache = None;
        Ok(())
    }

    /// Same records with the hidden achieved-task labels removed.
    pub fn without_labels(&self) -> TrialStore {
        TrialStore {
            records: self
                .records
                .iter()
                .map(|r| TrialRecord {
                    filter: r.filter.without_labels(),
                    ..r.clone()
                })
                .collect(),
            cache: None,
        }
    }

    /// Reorders records; ids stay attached to their trials.
    pub fn permuted(&self, order: &[usize]) -> TrialStore {
        TrialStore {
            records: order.iter().map(|&i| self.records[i].clone()).collect(),
            cache: None,
        }
    }

    /// Embeddings of every record under `params`, recomputed when the parameters change.
    pub fn embeddings(&mut self, params: &ModelParams) -> Result<&[Embedding]> {
        let fp = fingerprint(params);
        let stale = !matches!(&self.cache, Some((f, e)) if *f == fp && e.len() == self.records.len());
        if stale {
            let e = self
                .records
                .iter()
                .map(|r| embed(params, &r.trajectory))
                .collect::<Result<Vec<_>>>()?;
            self.cache = Some((fp, e));
        }
        Ok(&self.cache.as_ref().expect("filled above").1)
    }
}

fn fingerprint(params: &ModelParams) -> u64 {
    let mut h = DefaultHasher::new();
    for t in &params.tensors {
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Initializes parameters and minimizes the joint loss on the demonstration datasets.
pub fn pretrain(
    world: &World,
    datasets: &[TaskDataset],
    network: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<CurvePoint>)> {
    let mut params = ModelParams::init(*network, world.obs_dim(), &mut rng_for(seed, &[stream::INIT]))?;
    let curve = train(&mut params, datasets, Objective::Total, cfg, derive_seed(seed, &[stream::TRAIN]))?;
    Ok((params, curve))
}

/// Trial `i` samples a training dataset, one of its demos and a fresh scene for that
/// dataset's task, then rolls out the policy with sampled actions. Trial `i` depends
/// only on `(seed, i)`, so a run with more trials extends one with fewer.
pub fn collect_trials(world: &World, params: &ModelParams, datasets: &[TaskDataset], count: usize, seed: u64) -> Result<Vec<Trial>> {
    collect_trial_range(world, params, datasets, 0..count, seed)
}

pub fn collect_trial_range(
    world: &World,
    params: &ModelParams,
    datasets: &[TaskDataset],
    range: std::ops::Range<usize>,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut embeddings: Vec<Vec<Option<Embedding>>> = datasets.iter().map(|d| vec![None; d.demos.len()]).collect();
    collect_with(world, datasets, range, seed, |di, j, _task| {
        if embeddings[di][j].is_none() {
            embeddings[di][j] = Some(embed(params, &datasets[di].demos[j])?);
        }
        let e = embeddings[di][j].as_ref().expect("filled above");
        Ok(Box::new(LearnedController::new(params, e.values(), true)?))
    })
}

/// The collection protocol with an arbitrary controller. `make(dataset, demo, task)`
/// builds the controller for one trial.
pub fn collect_with<'p>(
    world: &World,
    datasets: &[TaskDataset],
    range: std::ops::Range<usize>,
    seed: u64,
    mut make: impl FnMut(usize, usize, &Task) -> Result<Box<dyn Controller + 'p>>,
) -> Result<Vec<Trial>> {
    let labeled: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].task.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::EmptyInput("collect_trials"));
    }
    let mut out = Vec::with_capacity(range.len());
    for i in range {
        let mut rng = rng_for(seed, &[stream::COLLECT, i as u64]);
        let di = labeled[rng.gen_range(0..labeled.len())];
        let dataset = &datasets[di];
        let task = dataset.task.expect("labeled");
        let j = rng.gen_range(0..dataset.demos.len());
        let scene = world.sample_scene_with(&task, &mut rng)?;
        let mut controller = make(di, j, &task)?;
        let r = rollout(world, &scene, controller.as_mut(), &mut rng)?;
        out.push(Trial {
            index: i,
            trajectory: Arc::new(r.trajectory),
            states: r.states,
            conditioning: (di, j),
            task,
        });
    }
    Ok(out)
}

/// Applies the filter to each trial and appends the useful ones. Returns how many
/// passed.
pub fn filter_and_store(world: &World, trials: &[Trial], store: &mut TrialStore) -> Result<usize> {
    let mut passed = 0;
    for t in trials {
        let verdict = world.filter_fn(&t.states, t.scene());
        if verdict.useful {
            store.push(TrialRecord {
                id: t.index,
                trajectory: t.trajectory.clone(),
                conditioning: t.conditioning,
                filter: verdict,
            })?;
            passed += 1;
        }
    }
    Ok(passed)
}

/// Two stored trials judged to show the same task. `a < b` are record ids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPair {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

/// Every unordered pair of stored trials whose embedding cosine similarity exceeds
/// `alpha`. With a cap, pairs are admitted in order of decreasing similarity while
/// both trials are under the cap. Output is sorted by `(a, b)`.
pub fn pair_trials(params: &ModelParams, store: &mut TrialStore, alpha: f64, cap: Option<usize>) -> Result<Vec<TrialPair>> {
    let ids: Vec<usize> = store.records().iter().map(|r| r.id).collect();
    let embeddings = store.embeddings(params)?;
    Ok(pair_embeddings(&ids, embeddings, alpha, cap))
}

/// The pairing rule of [`pair_trials`] on precomputed embeddings, `ids[i]` owning
/// `embeddings[i]`.
pub fn pair_embeddings(ids: &[usize], embeddings: &[Embedding], alpha: f64, cap: Option<usize>) -> Vec<TrialPair> {
    let mut pairs = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (a, b, ea, eb) = if ids[i] < ids[j] {
                (ids[i], ids[j], &embeddings[i], &embeddings[j])
            } else {
                (ids[j], ids[i], &embeddings[j], &embeddings[i])
            };
            let s = ea.cosine(eb);
            if s > alpha {
                pairs.push(TrialPair { a, b, similarity: s });
            }
        }
    }
    if let Some(cap) = cap {
        pairs.sort_by(|x, y| y.similarity.total_cmp(&x.similarity).then((x.a, x.b).cmp(&(y.a, y.b))));
        let mut used = std::collections::HashMap::new();
        pairs.retain(|p| {
            let (ua, ub) = (used.get(&p.a).copied().unwrap_or(0), used.get(&p.b).copied().unwrap_or(0));
            if ua < cap && ub < cap {
                used.insert(p.a, ua + 1);
                used.insert(p.b, ub + 1);
                true
            } else {
                false
            }
        });
    }
    pairs.sort_by_key(|p| (p.a, p.b));
    pairs.dedup_by_key(|p| (p.a, p.b));
    pairs
}

/// Two-demo datasets, one per pair.
pub fn paired_datasets(store: &TrialStore, pairs: &[TrialPair]) -> Result<Vec<TaskDataset>> {
    let by_id: std::collections::HashMap<usize, &TrialRecord> = store.records().iter().map(|r| (r.id, r)).collect();
    pairs
        .iter()
        .map(|p| {
            let get = |id: usize| {
                by_id
                    .get(&id)
                    .map(|r| r.trajectory.clone())
                    .ok_or_else(|| Error::InvalidTensor(format!("pair references unknown trial {id}")))
            };
            Ok(TaskDataset {
                task: None,
                demos: vec![get(p.a)?, get(p.b)?],
                provenance: Provenance::PairedTrial,
            })
        })
        .collect()
}

/// Fraction of pairs whose trials achieved at least one common task, by hidden labels.
pub fn pairing_precision(store: &TrialStore, pairs: &[TrialPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let by_id: std::collections::HashMap<usize, &TrialRecord> = store.records().iter().map(|r| (r.id, r)).collect();
    let good = pairs
        .iter()
        .filter(|p| intersects(&by_id[&p.a].filter, &by_id[&p.b].filter))
        .count();
    Some(good as f64 / pairs.len() as f64)
}

/// Precision a uniformly random pairing would have: the fraction of all unordered
/// pairs of stored trials that share an achieved task.
pub fn random_pairing_precision(store: &TrialStore) -> Option<f64> {
    let r = store.records();
    let total = r.len() * r.len().saturating_sub(1) / 2;
    if total == 0 {
        return None;
    }
    let mut good = 0usize;
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            good += usize::from(intersects(&r[i].filter, &r[j].filter));
        }
    }
    Some(good as f64 / total as f64)
}

fn intersects(a: &FilterResult, b: &FilterResult) -> bool {
    a.oracle_achieved().iter().any(|t| b.oracle_achieved().contains(t))
}

/// Minimizes the one-shot imitation loss (plus contrastive, if configured) on the
/// union of demonstration and paired datasets.
pub fn retrain(
    world: &World,
    params: &ModelParams,
    datasets: &[TaskDataset],
    paired: &[TaskDataset],
    cfg: &RetrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<CurvePoint>)> {
    let mut p = if cfg.from_scratch {
        ModelParams::init(params.config, world.obs_dim(), &mut rng_for(seed, &[stream::INIT]))?
    } else {
        params.clone()
    };
    let union: Vec<TaskDataset> = datasets.iter().chain(paired).cloned().collect();
    let objective = if cfg.include_contrastive { Objective::Total } else { Objective::Oil };
    let curve = train(&mut p, &union, objective, &cfg.train, derive_seed(seed, &[stream::RETRAIN]))?;
    Ok((p, curve))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub trials: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub store_size: usize,
    pub pairs: usize,
    pub pairing_precision: Option<f64>,
    pub random_precision: Option<f64>,
    pub retrain_curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiliReport {
    pub pretrain_curve: Vec<CurvePoint>,
    pub iterations: Vec<IterationReport>,
}

pub struct MiliOutcome {
    pub params: ModelParams,
    pub store: TrialStore,
    pub paired: Vec<TaskDataset>,
    pub report: MiliReport,
}

/// One improvement round from already collected trials: filter, pair against the whole
/// store, retrain. Retraining is skipped when no new pair was formed, so an empty
/// round returns the input parameters unchanged.
pub fn improve_round(
    world: &World,
    params: &ModelParams,
    datasets: &[TaskDataset],
    trials: &[Trial],
    store: &mut TrialStore,
    paired: &mut Vec<TaskDataset>,
    cfg: &MiliConfig,
    iteration: usize,
    seed: u64,
) -> Result<(ModelParams, IterationReport)> {
    cfg.validate()?;
    let passed = filter_and_store(world, trials, store)?;
    let pairs = pair_trials(params, store, cfg.alpha, cfg.pair_cap)?;
    let mut report = IterationReport {
        iteration,
        trials: trials.len(),
        passed,
        pass_rate: if trials.is_empty() { 0.0 } else { passed as f64 / trials.len() as f64 },
        store_size: store.len(),
        pairs: pairs.len(),
        pairing_precision: pairing_precision(store, &pairs),
        random_precision: random_pairing_precision(store),
        retrain_curve: Vec::new(),
    };
    *paired = paired_datasets(store, &pairs)?;
    if paired.is_empty() {
        return Ok((params.clone(), report));
    }
    let (p, curve) = retrain(world, params, datasets, paired, &cfg.retrain, derive_seed(seed, &[iteration as u64]))?;
    report.retrain_curve = curve;
    Ok((p, report))
}

/// The full loop: pretrain, then `iterations` rounds of collect, filter, pair and
/// retrain.
pub fn run_mili(
    world: &World,
    datasets: &[TaskDataset],
    network: &NetworkConfig,
    pretrain_cfg: &TrainConfig,
    cfg: &MiliConfig,
    seed: u64,
) -> Result<MiliOutcome> {
    cfg.validate()?;
    let (pretrained, pretrain_curve) = pretrain(world, datasets, network, pretrain_cfg, seed)?;
    let mut outcome = run_mili_from(world, &pretrained, datasets, cfg, seed)?;
    outcome.report.pretrain_curve = pretrain_curve;
    Ok(outcome)
}

/// The improvement rounds of [`run_mili`] starting from given pretrained parameters.
pub fn run_mili_from(world: &World, pretrained: &ModelParams, datasets: &[TaskDataset], cfg: &MiliConfig, seed: u64) -> Result<MiliOutcome> {
    cfg.validate()?;
    let mut params = pretrained.clone();
    let mut store = TrialStore::new();
    let mut paired = Vec::new();
    let mut report = MiliReport::default();
    for it in 0..cfg.iterations {
        let collect_seed = derive_seed(seed, &[stream::COLLECT, it as u64]);
        // Ids stay unique across rounds.
        let start = it * cfg.trials;
        let trials = collect_trial_range(world, &params, datasets, start..start + cfg.trials, collect_seed)?;
        let (p, r) = improve_round(world, &params, datasets, &trials, &mut store, &mut paired, cfg, it, seed)?;
        params = p;
        report.iterations.push(r);
    }
    Ok(MiliOutcome {
        params,
        store,
        paired,
        report,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::expert::{collect_demos, ExpertConfig, ExpertController};
    use crate::policy::{train_observed, EncoderInput};
    use crate::world::{TaskSets, WorldConfig};

    fn setup(tasks: usize) -> (World, Vec<TaskDataset>) {
        let world = World::new(WorldConfig::default(), 0).unwrap();
        let sets = TaskSets::generate(&world.config, &world.vocab, 0).unwrap();
        let picked: Vec<Task> = sets.train.iter().step_by(sets.train.len() / tasks).take(tasks).copied().collect();
        let demos = collect_demos(&world, &picked, 2, &ExpertConfig::default(), 0).unwrap();
        (world, demos)
    }

    fn small_network() -> NetworkConfig {
        NetworkConfig {
            encoder_width: 8,
            conv_channels: 8,
            embed_dim: 4,
            policy_width: 8,
            encoder_input: EncoderInput::Slots,
            ..NetworkConfig::default()
        }
    }

    fn small_params(world: &World, seed: u64) -> ModelParams {
        ModelParams::init(small_network(), world.obs_dim(), &mut rng_for(seed, &[])).unwrap()
    }

    fn expert_trials(world: &World, demos: &[TaskDataset], n: usize, seed: u64) -> Vec<Trial> {
        collect_with(world, demos, 0..n, seed, |_, _, task| {
            Ok(Box::new(ExpertController {
                task: *task,
                config: ExpertConfig::default(),
            }))
        })
        .unwrap()
    }

    fn expert_store(world: &World, demos: &[TaskDataset], n: usize) -> TrialStore {
        let trials = expert_trials(world, demos, n, 3);
        let mut store = TrialStore::new();
        filter_and_store(world, &trials, &mut store).unwrap();
        store
    }

    #[test]
    fn collection_count_and_conditioning_integrity() {
        let (world, demos) = setup(8);
        let p = small_params(&world, 1);
        let trials = collect_trials(&world, &p, &demos, 12, 5).unwrap();
        assert_eq!(trials.len(), 12);
        for t in &trials {
            let (d, j) = t.conditioning;
            assert!(j < demos[d].demos.len());
            assert_eq!(Some(t.task), demos[d].task);
            assert!(t.scene().index_of(t.task.subject).is_some());
            assert_eq!(t.trajectory.len(), world.config.horizon);
        }
        // Prefix property.
        let more = collect_trials(&world, &p, &demos, 15, 5).unwrap();
        for (a, b) in trials.iter().zip(&more) {
            assert_eq!(a.trajectory, b.trajectory);
        }
    }

    #[test]
    fn expert_substitute_passes_the_filter() {
        let (world, demos) = setup(8);
        let trials = expert_trials(&world, &demos, 40, 9);
        let mut store = TrialStore::new();
        let passed = filter_and_store(&world, &trials, &mut store).unwrap();
        assert!(passed as f64 / 40.0 >= 0.5, "{passed}/40");
        assert_eq!(store.len(), passed);
    }

    #[test]
    fn successful_expert_trials_all_pass() {
        let (world, demos) = setup(8);
        let trials: Vec<Trial> = expert_trials(&world, &demos, 30, 11)
            .into_iter()
            .filter(|t| world.check_success(&t.states, t.scene(), &t.task).unwrap())
            .collect();
        let mut store = TrialStore::new();
        assert_eq!(filter_and_store(&world, &trials, &mut store).unwrap(), trials.len());
    }

    #[test]
    fn motionless_trials_never_pass_and_store_only_grows() {
        struct Still;
        impl Controller for Still {
            fn act(&mut self, _: &World, _: &WorldState, _: &Scene, _: &[f64], _: &mut crate::seeding::Rng) -> Result<crate::world::Action> {
                Ok([0.0; 4])
            }
        }
        let (world, demos) = setup(8);
        let still = collect_with(&world, &demos, 0..20, 2, |_, _, _| Ok(Box::new(Still))).unwrap();
        let mut store = expert_store(&world, &demos, 10);
        let before = store.len();
        assert_eq!(filter_and_store(&world, &still, &mut store).unwrap(), 0);
        assert_eq!(store.len(), before);
    }

    #[test]
    fn store_refuses_unfiltered_and_duplicate_records() {
        let (world, demos) = setup(4);
        let mut store = expert_store(&world, &demos, 6);
        let r = store.records()[0].clone();
        assert!(store.push(r.clone()).is_err());
        let failed = TrialRecord {
            id: 1_000,
            filter: FilterResult::new(Vec::new()),
            ..r
        };
        assert!(store.push(failed).is_err());
    }

    fn brute_force_pairs(store: &TrialStore, e: &[Embedding], alpha: f64) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        let r = store.records();
        for i in 0..r.len() {
            for j in 0..r.len() {
                if i == j {
                    continue;
                }
                let dot: f64 = e[i].values().iter().zip(e[j].values()).map(|(a, b)| a * b).sum();
                let norm = |v: &Embedding| v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
                if dot / (norm(&e[i]) * norm(&e[j])) > alpha {
                    out.insert((r[i].id.min(r[j].id), r[i].id.max(r[j].id)));
                }
            }
        }
        out
    }

    fn as_set(pairs: &[TrialPair]) -> BTreeSet<(usize, usize)> {
        pairs.iter().map(|p| (p.a, p.b)).collect()
    }

    #[test]
    fn pairing_matches_brute_force_on_twenty_trials() {
        let (world, demos) = setup(4);
        let full = expert_store(&world, &demos, 26);
        let mut store = full.permuted(&(0..20.min(full.len())).collect::<Vec<_>>());
        assert_eq!(store.len(), 20);
        let p = small_params(&world, 4);
        let e: Vec<Embedding> = store.records().iter().map(|r| embed(&p, &r.trajectory).unwrap()).collect();
        for alpha in [0.0, 0.5, 0.9, 0.99] {
            let got = pair_trials(&p, &mut store, alpha, None).unwrap();
            assert_eq!(as_set(&got), brute_force_pairs(&store, &e, alpha), "alpha {alpha}");
            for pair in &got {
                assert!(pair.a < pair.b && pair.similarity > alpha);
            }
        }
    }

    #[test]
    fn identical_trials_pair_and_orthogonal_do_not() {
        let e = vec![
            Embedding::new(vec![1.0, 0.0]).unwrap(),
            Embedding::new(vec![1.0, 0.0]).unwrap(),
            Embedding::new(vec![0.0, 1.0]).unwrap(),
        ];
        let pairs = pair_embeddings(&[0, 1, 2], &e, 0.9, None);
        assert_eq!(as_set(&pairs), BTreeSet::from([(0, 1)]));
        assert_eq!(pairs[0].similarity, 1.0);
    }

    #[test]
    fn pairing_is_invariant_to_scale_and_order() {
        let mut rng = rng_for(77, &[]);
        let ids: Vec<usize> = (0..20).collect();
        // Clustered embeddings so the threshold actually bites.
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let e: Vec<Embedding> = ids
            .iter()
            .map(|i| Embedding::new(centers[i % 4].iter().map(|c| c + rng.gen_range(-0.2..0.2)).collect()).unwrap())
            .collect();
        let base = pair_embeddings(&ids, &e, 0.9, None);
        assert!(!base.is_empty());
        // Powers of two scale exactly, so similarities are bit-identical.
        let scaled: Vec<Embedding> = e.iter().enumerate().map(|(i, v)| v.scaled(2f64.powi(i as i32 % 7 - 3)).unwrap()).collect();
        assert_eq!(pair_embeddings(&ids, &scaled, 0.9, None), base);
        let odd: Vec<Embedding> = e.iter().enumerate().map(|(i, v)| v.scaled(0.3 + i as f64 * 1.7).unwrap()).collect();
        assert_eq!(as_set(&pair_embeddings(&ids, &odd, 0.9, None)), as_set(&base));
        let mut order: Vec<usize> = (0..20).collect();
        order.reverse();
        order.swap(3, 11);
        let ids2: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
        let e2: Vec<Embedding> = order.iter().map(|&i| e[i].clone()).collect();
        let reordered = pair_embeddings(&ids2, &e2, 0.9, None);
        assert_eq!(as_set(&reordered), as_set(&base));
        for (x, y) in reordered.iter().zip(&base) {
            assert_eq!(x.similarity, y.similarity);
        }
    }

    #[test]
    fn cap_limits_pairs_per_trial() {
        let e: Vec<Embedding> = (0..6).map(|i| Embedding::new(vec![1.0, 0.01 * i as f64]).unwrap()).collect();
        let ids: Vec<usize> = (0..6).collect();
        assert_eq!(pair_embeddings(&ids, &e, 0.9, None).len(), 15);
        let capped = pair_embeddings(&ids, &e, 0.9, Some(1));
        let mut seen = BTreeSet::new();
        for p in &capped {
            assert!(seen.insert(p.a) && seen.insert(p.b));
        }
        assert_eq!(capped.len(), 3);
    }

    #[test]
    fn pairing_never_reads_hidden_labels() {
        let (world, demos) = setup(4);
        let mut store = expert_store(&world, &demos, 20);
        let mut stripped = store.without_labels();
        assert!(stripped.records().iter().all(|r| r.filter.oracle_achieved().is_empty()));
        let p = small_params(&world, 6);
        for alpha in [0.5, 0.9] {
            assert_eq!(
                pair_trials(&p, &mut store, alpha, None).unwrap(),
                pair_trials(&p, &mut stripped, alpha, None).unwrap()
            );
        }
    }

    #[test]
    fn precision_against_brute_force_labels() {
        let (world, demos) = setup(4);
        let mut store = expert_store(&world, &demos, 20);
        let p = small_params(&world, 8);
        let pairs = pair_trials(&p, &mut store, 0.0, None).unwrap();
        let by_id: std::collections::HashMap<usize, &TrialRecord> = store.records().iter().map(|r| (r.id, r)).collect();
        let good = pairs
            .iter()
            .filter(|q| {
                let a: BTreeSet<_> = by_id[&q.a].filter.oracle_achieved().iter().collect();
                by_id[&q.b].filter.oracle_achieved().iter().any(|t| a.contains(t))
            })
            .count();
        assert_eq!(pairing_precision(&store, &pairs), Some(good as f64 / pairs.len() as f64));
        let r = random_pairing_precision(&store).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert_eq!(pairing_precision(&store, &[]), None);
    }

    #[test]
    fn paired_datasets_hold_both_trials() {
        let (world, demos) = setup(4);
        let mut store = expert_store(&world, &demos, 12);
        let p = small_params(&world, 2);
        let pairs = pair_trials(&p, &mut store, -0.99, None).unwrap();
        let sets = paired_datasets(&store, &pairs).unwrap();
        assert_eq!(sets.len(), pairs.len());
        for (d, q) in sets.iter().zip(&pairs) {
            assert_eq!(d.demos.len(), 2);
            assert_eq!(d.provenance, Provenance::PairedTrial);
            assert!(d.task.is_none());
            let a = store.records().iter().find(|r| r.id == q.a).unwrap();
            assert!(Arc::ptr_eq(&d.demos[0], &a.trajectory));
        }
    }

    #[test]
    fn embeddings_are_recomputed_when_parameters_change() {
        let (world, demos) = setup(4);
        let mut store = expert_store(&world, &demos, 6);
        let p1 = small_params(&world, 1);
        let p2 = small_params(&world, 2);
        let e1 = store.embeddings(&p1).unwrap().to_vec();
        let e2 = store.embeddings(&p2).unwrap().to_vec();
        assert_ne!(e1, e2);
        assert_eq!(store.embeddings(&p1).unwrap(), &e1[..]);
    }

    #[test]
    fn paired_datasets_are_drawn_during_retraining() {
        let (world, demos) = setup(4);
        let mut store = expert_store(&world, &demos, 12);
        let mut p = small_params(&world, 3);
        let pairs = pair_trials(&p, &mut store, -0.99, None).unwrap();
        let paired = paired_datasets(&store, &pairs).unwrap();
        assert!(!paired.is_empty());
        let union: Vec<TaskDataset> = demos.iter().chain(&paired).cloned().collect();
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        let mut hits = 0;
        train_observed(&mut p, &union, Objective::Oil, &cfg, 5, |_, mb| {
            hits += mb.datasets_touched().filter(|&d| d >= demos.len()).count();
        })
        .unwrap();
        assert!(hits > 0);
    }

    #[test]
    fn retrain_is_deterministic_and_empty_rounds_are_no_ops() {
        let (world, demos) = setup(4);
        let p = small_params(&world, 3);
        let cfg = RetrainConfig {
            train: TrainConfig {
                steps: 10,
                ..TrainConfig::default()
            },
            ..RetrainConfig::default()
        };
        let a = retrain(&world, &p, &demos, &[], &cfg, 4).unwrap().0;
        let b = retrain(&world, &p, &demos, &[], &cfg, 4).unwrap().0;
        assert_eq!(a.tensors, b.tensors);
        assert_ne!(a.tensors, p.tensors);

        let mili = MiliConfig {
            trials: 0,
            retrain: cfg,
            ..MiliConfig::default()
        };
        let out = run_mili_from(&world, &p, &demos, &mili, 1).unwrap();
        assert_eq!(out.params.tensors, p.tensors);
        let r = &out.report.iterations[0];
        assert_eq!((r.trials, r.passed, r.pairs, r.pass_rate), (0, 0, 0, 0.0));
    }

    #[test]
    fn short_run_reports_sane_metrics_and_repeats_exactly() {
        let (world, demos) = setup(4);
        let pre = TrainConfig {
            steps: 5,
            ..TrainConfig::default()
        };
        let mili = MiliConfig {
            trials: 6,
            retrain: RetrainConfig {
                train: TrainConfig {
                    steps: 3,
                    ..TrainConfig::default()
                },
                ..RetrainConfig::default()
            },
            ..MiliConfig::default()
        };
        let a = run_mili(&world, &demos, &small_network(), &pre, &mili, 9).unwrap();
        let b = run_mili(&world, &demos, &small_network(), &pre, &mili, 9).unwrap();
        assert_eq!(a.params.tensors, b.params.tensors);
        assert_eq!(a.report, b.report);
        let r = &a.report.iterations[0];
        assert!((0.0..=1.0).contains(&r.pass_rate));
        assert_eq!(r.trials, 6);
        assert!(r.store_size == r.passed);
        assert!(!a.report.pretrain_curve.is_empty());
    }

    #[test]
    fn invalid_config_is_named() {
        let bad = MiliConfig {
            alpha: 1.5,
            ..MiliConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "mili.alpha"));
    }
}
