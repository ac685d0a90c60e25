use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Family, ObjectType, Split, Task, WorldConfig, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, stream};

/// Object types for one world seed, partitioned into disjoint train / val / test ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub types: Vec<ObjectType>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Vocabulary {
    pub fn generate(config: &WorldConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[stream::VOCAB]);
        let n = config.vocab_size;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let train = order[..config.train_types].to_vec();
        let val = order[config.train_types..config.train_types + config.val_types].to_vec();
        let test = order[config.train_types + config.val_types..].to_vec();

        let mut pressable = vec![false; n];
        for part in [&train, &val, &test] {
            let buttons = ((part.len() as f64 * config.button_fraction).round() as usize).clamp(1, part.len() - 1);
            for &id in &part[..buttons] {
                pressable[id] = true;
            }
        }
        let types = (0..n)
            .map(|id| {
                let mut feature = [0.0; FEATURE_DIM];
                for f in &mut feature {
                    *f = rng.sample::<f64, _>(StandardNormal);
                }
                ObjectType {
                    id,
                    feature,
                    pressable: pressable[id],
                    graspable: !pressable[id],
                    radius: rng.gen_range(config.radius_min..=config.radius_max),
                }
            })
            .collect();
        let sorted = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        Vocabulary {
            types,
            train: sorted(train),
            val: sorted(val),
            test: sorted(test),
        }
    }

    pub fn split_types(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, type_id: usize) -> Split {
        if self.train.binary_search(&type_id).is_ok() {
            Split::Train
        } else if self.val.binary_search(&type_id).is_ok() {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Every task expressible with the given split's types.
    pub fn candidate_tasks(&self, split: Split, family: Family) -> Vec<Task> {
        let ids = self.split_types(split);
        let mut out = Vec::new();
        for &s in ids {
            let st = &self.types[s];
            match family {
                Family::Press if st.pressable => out.push(Task {
                    family,
                    subject: s,
                    target: None,
                    split,
                }),
                Family::Grasp if st.graspable => out.push(Task {
                    family,
                    subject: s,
                    target: None,
                    split,
                }),
                Family::Push | Family::PickPlace if st.graspable => {
                    for &t in ids.iter().filter(|&&t| t != s) {
                        out.push(Task {
                            family,
                            subject: s,
                            target: Some(t),
                            split,
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSets {
    pub train: Vec<Task>,
    pub val: Vec<Task>,
    pub test: Vec<Task>,
}

impl TaskSets {
    pub fn generate(config: &WorldConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[stream::TASKS]);
        let mut pick = |split: Split, count: usize| -> Result<Vec<Task>> {
            let mut pools: Vec<Vec<Task>> = Family::ALL
                .iter()
                .map(|&f| {
                    let mut c = vocab.candidate_tasks(split, f);
                    c.shuffle(&mut rng);
                    c
                })
                .collect();
            let quotas = allocate(count, &pools.iter().map(Vec::len).collect::<Vec<_>>()).ok_or_else(|| {
                Error::TaskGeneration(format!(
                    "{count} {split:?} tasks requested but only {:?} available per family",
                    pools.iter().map(Vec::len).collect::<Vec<_>>()
                ))
            })?;
            Ok(pools
                .iter_mut()
                .zip(quotas)
                .flat_map(|(pool, q)| pool.drain(..q).collect::<Vec<_>>())
                .collect())
        };
        let train = pick(Split::Train, config.train_tasks)?;
        let val = pick(Split::Val, config.val_tasks)?;
        let test = pick(Split::Test, config.test_tasks)?;
        Ok(TaskSets { train, val, test })
    }

    pub fn split(&self, split: Split) -> &[Task] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Splits `count` as evenly as possible over families, at least one each, capped by
/// availability; any shortfall moves to families with spare candidates.
fn allocate(count: usize, available: &[usize]) -> Option<Vec<usize>> {
    let k = available.len();
    if available.iter().any(|&a| a == 0) || count < k || count > available.iter().sum() {
        return None;
    }
    let mut quota: Vec<usize> = (0..k).map(|i| count / k + usize::from(i < count % k)).collect();
    let mut leftover = 0;
    for (q, &a) in quota.iter_mut().zip(available) {
        if *q > a {
            leftover += *q - a;
            *q = a;
        }
    }
    // Hand leftovers to the families with the most room, one at a time.
    while leftover > 0 {
        let i = (0..k).max_by_key(|&i| (available[i] - quota[i], std::cmp::Reverse(i)))?;
        if available[i] == quota[i] {
            return None;
        }
        quota[i] += 1;
        leftover -= 1;
    }
    Some(quota)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_is_even_then_redistributed() {
        assert_eq!(allocate(80, &[8, 12, 228, 228]), Some(vec![8, 12, 30, 30]));
        assert_eq!(allocate(10, &[2, 3, 12, 12]), Some(vec![2, 3, 3, 2]));
        assert_eq!(allocate(3, &[5, 5, 5, 5]), None);
        assert_eq!(allocate(10, &[0, 5, 5, 5]), None);
        assert_eq!(allocate(100, &[5, 5, 5, 5]), None);
    }

    #[test]
    fn default_task_counts() {
        let cfg = WorldConfig::default();
        let vocab = Vocabulary::generate(&cfg, 0);
        let sets = TaskSets::generate(&cfg, &vocab, 0).unwrap();
        assert_eq!((sets.train.len(), sets.val.len(), sets.test.len()), (80, 10, 10));
    }

    #[test]
    fn splits_use_disjoint_types_and_cover_all_families() {
        let cfg = WorldConfig::default();
        for seed in 0..5 {
            let vocab = Vocabulary::generate(&cfg, seed);
            let sets = TaskSets::generate(&cfg, &vocab, seed).unwrap();
            for split in [Split::Train, Split::Val, Split::Test] {
                let tasks = sets.split(split);
                for f in Family::ALL {
                    assert!(tasks.iter().any(|t| t.family == f), "{split:?} lacks {f:?}");
                }
                for t in tasks {
                    for id in t.type_ids() {
                        assert_eq!(vocab.split_of(id), split, "{t} uses type {id}");
                    }
                }
                let mut uniq = tasks.to_vec();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), tasks.len());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let v1 = Vocabulary::generate(&cfg, 7);
        let v2 = Vocabulary::generate(&cfg, 7);
        assert_eq!(v1, v2);
        assert_eq!(
            TaskSets::generate(&cfg, &v1, 7).unwrap(),
            TaskSets::generate(&cfg, &v2, 7).unwrap()
        );
    }

    #[test]
    fn too_many_tasks_is_an_error() {
        let cfg = WorldConfig {
            test_tasks: 500,
            ..WorldConfig::default()
        };
        let vocab = Vocabulary::generate(&cfg, 0);
        assert!(matches!(
            TaskSets::generate(&cfg, &vocab, 0),
            Err(Error::TaskGeneration(_))
        ));
    }

    #[test]
    fn every_type_has_a_kind() {
        let cfg = WorldConfig::default();
        let vocab = Vocabulary::generate(&cfg, 3);
        assert!(vocab.types.iter().all(|t| t.pressable || t.graspable));
    }
}
