use rand::seq::SliceRandom;
use rand::Rng;

use super::{dist, Scene, SceneObject, Task, World};
use crate::error::{Error, Result};
use crate::seeding::Rng as SeedRng;

const PLACEMENT_ATTEMPTS: usize = 2_000;
const SCENE_RESTARTS: usize = 50;

impl World {
    /// Scene with the task's objects plus distractors from the same split, placed by
    /// rejection sampling. Always holds at least two objects.
    pub fn sample_scene(&self, task: &Task, seed: u64) -> Result<Scene> {
        let mut rng = <SeedRng as rand::SeedableRng>::seed_from_u64(seed);
        self.sample_scene_with(task, &mut rng)
    }

    pub fn sample_scene_with(&self, task: &Task, rng: &mut SeedRng) -> Result<Scene> {
        for id in task.type_ids() {
            if id >= self.vocab.types.len() {
                return Err(Error::MissingObject {
                    task: task.to_string(),
                    type_id: id,
                });
            }
        }
        let mut types: Vec<usize> = task.type_ids().collect();
        let min_distractors = usize::from(types.len() < 2);
        let pool: Vec<usize> = self
            .vocab
            .split_types(task.split)
            .iter()
            .copied()
            .filter(|id| !types.contains(id))
            .collect();
        let max_distractors = self
            .config
            .max_distractors
            .min(pool.len())
            .min(self.config.slots - types.len());
        let n_distractors = rng.gen_range(min_distractors.min(max_distractors)..=max_distractors);
        types.extend(pool.choose_multiple(rng, n_distractors).copied());
        types.shuffle(rng);

        let lo = self.config.placement_margin;
        let hi = 1.0 - lo;
        'restart: for _ in 0..SCENE_RESTARTS {
            let mut objects: Vec<SceneObject> = Vec::with_capacity(types.len());
            for &type_id in &types {
                let r = self.object_type(type_id).radius;
                let mut placed = None;
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let pos = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
                    let clear = objects.iter().all(|o| {
                        dist(o.pos, pos) >= r + self.object_type(o.type_id).radius + self.config.separation_margin
                    });
                    if clear {
                        placed = Some(pos);
                        break;
                    }
                }
                match placed {
                    Some(pos) => objects.push(SceneObject { type_id, pos }),
                    None => continue 'restart,
                }
            }
            let effector_start = [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)];
            return Ok(Scene {
                objects,
                effector_start,
            });
        }
        Err(Error::Placement {
            task: task.to_string(),
            attempts: SCENE_RESTARTS,
        })
    }
}
