use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng as _;

use super::{Bound, ModelParams};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::expert::{Provenance, TaskDataset, Trajectory};
use crate::seeding::Rng;
use crate::world::Action;

/// Diagonal-Gaussian negative log-likelihood of one action.
pub fn nll(dist: &super::ActionDistribution, action: &Action) -> f64 {
    let k = action.len() as f64;
    let mut total = 0.5 * k * (2.0 * PI).ln();
    for j in 0..action.len() {
        let s = dist.log_std[j];
        let d = action[j] - dist.mean[j];
        total += s + d * d / (2.0 * (2.0 * s).exp());
    }
    total
}

/// A scalar loss and its gradient for every parameter tensor, in slot order.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

fn evaluate(params: &ModelParams, build: impl FnOnce(&mut Graph, &Bound) -> Result<NodeId>) -> Result<LossValue> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = build(&mut g, &bound)?;
    let value = g.value(out).item();
    let mut grads = g.backward(out)?;
    let grads = bound
        .ids
        .iter()
        .zip(&params.tensors)
        .map(|(&id, t)| grads.take_or_zeros(id, t))
        .collect();
    Ok(LossValue { value, grads })
}

fn check_pairs(datasets: &[TaskDataset]) -> Result<()> {
    match datasets.iter().find(|d| d.demos.len() < 2) {
        Some(d) => Err(Error::TooFewDemos {
            task: d.label(),
            demos: d.demos.len(),
        }),
        None => Ok(()),
    }
}

/// Unconditioned behavior cloning: summed NLL over every step of every trajectory,
/// with the embedding input held at zero.
pub fn loss_bc(params: &ModelParams, trajectories: &[&Trajectory]) -> Result<LossValue> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("loss_bc"));
    }
    evaluate(params, |g, b| {
        let terms = trajectories
            .iter()
            .map(|t| b.trajectory_nll(g, t, None))
            .collect::<Result<Vec<_>>>()?;
        g.add_all(&terms)
    })
}

/// One-shot imitation loss summed over every dataset and every ordered demo pair
/// `m != n`: the actions of demo `m` scored under the policy conditioned on demo `n`.
pub fn loss_oil(params: &ModelParams, datasets: &[TaskDataset]) -> Result<LossValue> {
    if datasets.is_empty() {
        return Err(Error::EmptyInput("loss_oil"));
    }
    check_pairs(datasets)?;
    evaluate(params, |g, b| {
        let mut cache = EmbeddingCache::default();
        let mut terms = Vec::new();
        for (di, d) in datasets.iter().enumerate() {
            for m in 0..d.demos.len() {
                for n in 0..d.demos.len() {
                    if m != n {
                        let e = cache.get(g, b, datasets, (di, n))?;
                        terms.push(b.trajectory_nll(g, &d.demos[m], Some(e))?);
                    }
                }
            }
        }
        g.add_all(&terms)
    })
}

/// Contrastive loss over all unordered demo pairs: squared distance for pairs from the
/// same dataset, `max(0, margin - distance)` for pairs from different datasets.
/// Datasets formed by trial pairing never serve as negatives.
pub fn loss_contrastive(params: &ModelParams, datasets: &[TaskDataset], margin: f64) -> Result<LossValue> {
    let keys: Vec<(usize, usize)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(di, d)| (0..d.demos.len()).map(move |j| (di, j)))
        .collect();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, &a) in keys.iter().enumerate() {
        for &b in &keys[i + 1..] {
            if a.0 == b.0 {
                positives.push((a, b));
            } else if is_labeled(&datasets[a.0]) && is_labeled(&datasets[b.0]) {
                negatives.push((a, b));
            }
        }
    }
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::EmptyInput("loss_contrastive"));
    }
    evaluate(params, |g, b| {
        let mut cache = EmbeddingCache::default();
        let terms = contrastive_terms(g, b, datasets, &mut cache, &positives, &negatives, margin)?;
        g.add_all(&terms)
    })
}

/// Full-sum joint loss: one-shot imitation plus contrastive.
pub fn loss_total(params: &ModelParams, datasets: &[TaskDataset], margin: f64) -> Result<LossValue> {
    let oil = loss_oil(params, datasets)?;
    let c = loss_contrastive(params, datasets, margin)?;
    Ok(LossValue {
        value: oil.value + c.value,
        grads: oil
            .grads
            .iter()
            .zip(&c.grads)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data).expect("matching shapes")
            })
            .collect(),
    })
}

fn is_labeled(d: &TaskDataset) -> bool {
    d.provenance != Provenance::PairedTrial
}

/// Contrastive loss over explicitly given embeddings, using the same term builder as
/// training. `same[i]` marks whether pair `i` is a same-task pair.
pub fn contrastive_from_embeddings(pairs: &[(Vec<f64>, Vec<f64>, bool)], margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let mut terms = Vec::with_capacity(pairs.len());
    for (a, b, same) in pairs {
        let a = g.constant(Tensor::row(a.clone()));
        let b = g.constant(Tensor::row(b.clone()));
        terms.push(pair_term(&mut g, a, b, *same, margin)?);
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    let total = g.add_all(&terms)?;
    Ok(g.value(total).item())
}

fn pair_term(g: &mut Graph, a: NodeId, b: NodeId, same: bool, margin: f64) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let h = g.squared_norm(diff)?;
    if same {
        Ok(h)
    } else {
        let neg = g.scale(h, -1.0)?;
        let gap = g.add_scalar(neg, margin)?;
        g.relu(gap)
    }
}

type DemoKey = (usize, usize);

#[derive(Default)]
struct EmbeddingCache {
    nodes: BTreeMap<DemoKey, NodeId>,
}

impl EmbeddingCache {
    fn get(&mut self, g: &mut Graph, b: &Bound, datasets: &[TaskDataset], key: DemoKey) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(&key) {
            return Ok(id);
        }
        let id = b.embed(g, &datasets[key.0].demos[key.1])?;
        self.nodes.insert(key, id);
        Ok(id)
    }
}

fn contrastive_terms(
    g: &mut Graph,
    b: &Bound,
    datasets: &[TaskDataset],
    cache: &mut EmbeddingCache,
    positives: &[(DemoKey, DemoKey)],
    negatives: &[(DemoKey, DemoKey)],
    margin: f64,
) -> Result<Vec<NodeId>> {
    let mut terms = Vec::with_capacity(positives.len() + negatives.len());
    for (pairs, same) in [(positives, true), (negatives, false)] {
        for &(x, y) in pairs {
            let ex = cache.get(g, b, datasets, x)?;
            let ey = cache.get(g, b, datasets, y)?;
            terms.push(pair_term(g, ex, ey, same, margin)?);
        }
    }
    Ok(terms)
}

/// One stochastic draw of loss terms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Minibatch {
    /// `(dataset, scored demo m, conditioning demo n)`.
    pub oil: Vec<(usize, usize, usize)>,
    pub positives: Vec<(DemoKey, DemoKey)>,
    pub negatives: Vec<(DemoKey, DemoKey)>,
    /// `(dataset, demo)` for unconditioned behavior cloning.
    pub bc: Vec<DemoKey>,
}

impl Minibatch {
    pub fn datasets_touched(&self) -> impl Iterator<Item = usize> + '_ {
        self.oil
            .iter()
            .map(|t| t.0)
            .chain(self.positives.iter().flat_map(|(a, b)| [a.0, b.0]))
            .chain(self.negatives.iter().flat_map(|(a, b)| [a.0, b.0]))
            .chain(self.bc.iter().map(|k| k.0))
    }
}

/// Samples `draws` (dataset, ordered pair) terms uniformly. With `contrastive_pairs >
/// 0`, positives reuse the drawn pairs and negatives pair demos already drawn from
/// different labeled datasets, so every embedding is computed once per step.
pub fn sample_minibatch(
    datasets: &[TaskDataset],
    draws: usize,
    contrastive_pairs: usize,
    rng: &mut Rng,
) -> Result<Minibatch> {
    if datasets.is_empty() {
        return Err(Error::EmptyInput("sample_minibatch"));
    }
    let mut mb = Minibatch::default();
    for _ in 0..draws {
        let di = rng.gen_range(0..datasets.len());
        let k = datasets[di].demos.len();
        if k < 2 {
            return Err(Error::TooFewDemos {
                task: datasets[di].label(),
                demos: k,
            });
        }
        let m = rng.gen_range(0..k);
        let n = (m + rng.gen_range(1..k)) % k;
        mb.oil.push((di, m, n));
    }
    if contrastive_pairs > 0 {
        mb.positives = mb
            .oil
            .iter()
            .take(contrastive_pairs)
            .map(|&(d, m, n)| ((d, n), (d, m)))
            .collect();
        let mut keys: Vec<DemoKey> = mb
            .oil
            .iter()
            .filter(|t| is_labeled(&datasets[t.0]))
            .flat_map(|&(d, m, n)| [(d, n), (d, m)])
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut candidates = Vec::new();
        for (i, &a) in keys.iter().enumerate() {
            for &b in &keys[i + 1..] {
                if a.0 != b.0 {
                    candidates.push((a, b));
                }
            }
        }
        let take = contrastive_pairs.min(candidates.len());
        let mut picked: Vec<usize> = sample(rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        mb.negatives = picked.into_iter().map(|i| candidates[i]).collect();
    }
    Ok(mb)
}

/// Samples `draws` demos uniformly over datasets for behavior cloning.
pub(crate) fn sample_bc(datasets: &[TaskDataset], draws: usize, rng: &mut Rng) -> Result<Minibatch> {
    let nonempty: Vec<usize> = (0..datasets.len()).filter(|&i| !datasets[i].demos.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::EmptyInput("sample_bc"));
    }
    let bc = (0..draws)
        .map(|_| {
            let d = nonempty[rng.gen_range(0..nonempty.len())];
            (d, rng.gen_range(0..datasets[d].demos.len()))
        })
        .collect();
    Ok(Minibatch {
        bc,
        ..Minibatch::default()
    })
}

/// Minibatch loss values. The imitation part is a per-step mean and the contrastive
/// part a per-pair mean, so both sit on comparable scales whatever the batch sizes.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: f64,
    pub imitation: f64,
    pub contrastive: f64,
    pub grads: Vec<Tensor>,
}

pub fn minibatch_loss(
    params: &ModelParams,
    datasets: &[TaskDataset],
    mb: &Minibatch,
    margin: f64,
    contrastive_weight: f64,
) -> Result<LossParts> {
    let mut parts = (0.0, 0.0);
    let value = evaluate(params, |g, b| {
        let mut cache = EmbeddingCache::default();
        let mut total_terms = Vec::new();
        let mut imitation = Vec::new();
        let mut steps = 0usize;
        for &(d, m, n) in &mb.oil {
            let e = cache.get(g, b, datasets, (d, n))?;
            let demo = &datasets[d].demos[m];
            steps += demo.len();
            imitation.push(b.trajectory_nll(g, demo, Some(e))?);
        }
        for &(d, j) in &mb.bc {
            let demo = &datasets[d].demos[j];
            steps += demo.len();
            imitation.push(b.trajectory_nll(g, demo, None)?);
        }
        if !imitation.is_empty() {
            let sum = g.add_all(&imitation)?;
            let mean = g.scale(sum, 1.0 / steps as f64)?;
            parts.0 = g.value(mean).item();
            total_terms.push(mean);
        }
        let c = contrastive_terms(g, b, datasets, &mut cache, &mb.positives, &mb.negatives, margin)?;
        if !c.is_empty() {
            let sum = g.add_all(&c)?;
            let mean = g.scale(sum, 1.0 / c.len() as f64)?;
            parts.1 = g.value(mean).item();
            total_terms.push(g.scale(mean, contrastive_weight)?);
        }
        if total_terms.is_empty() {
            return Err(Error::EmptyInput("minibatch_loss"));
        }
        g.add_all(&total_terms)
    })?;
    Ok(LossParts {
        total: value.value,
        imitation: parts.0,
        contrastive: parts.1,
        grads: value.grads,
    })
}
