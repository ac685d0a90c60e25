use serde::{Deserialize, Serialize};

use super::{dist, Family, Scene, Task, World, WorldState};
use crate::error::{Error, Result};

/// Verdict of the usefulness filter. `achieved` is ground truth kept for oracle
/// analyses only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub useful: bool,
    achieved: Vec<Task>,
}

impl FilterResult {
    pub fn new(achieved: Vec<Task>) -> Self {
        FilterResult {
            useful: !achieved.is_empty(),
            achieved,
        }
    }

    /// Hidden ground-truth labels. Only oracle code paths should call this.
    pub fn oracle_achieved(&self) -> &[Task] {
        &self.achieved
    }

    /// Same verdict with the labels removed.
    pub fn without_labels(&self) -> FilterResult {
        FilterResult {
            useful: self.useful,
            achieved: Vec::new(),
        }
    }
}

impl World {
    /// Success predicate of `task` over the state sequence `states[0..=T]`.
    pub fn check_success(&self, states: &[WorldState], scene: &Scene, task: &Task) -> Result<bool> {
        let missing = |type_id| Error::MissingObject {
            task: task.to_string(),
            type_id,
        };
        let (first, last) = match (states.first(), states.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::EmptyInput("check_success")),
        };
        let si = scene.index_of(task.subject).ok_or_else(|| missing(task.subject))?;
        let ti = match task.target {
            Some(t) => Some(scene.index_of(t).ok_or_else(|| missing(t))?),
            None => None,
        };
        let cfg = &self.config;
        let r_s = self.object_type(task.subject).radius;
        let near_target = |s: &WorldState| -> bool {
            let ti = ti.expect("target checked above");
            let r_t = self.object_type(scene.objects[ti].type_id).radius;
            dist(s.objects[si].pos, s.objects[ti].pos) <= r_s + r_t + cfg.place_tolerance
        };
        Ok(match task.family {
            Family::Press => states
                .iter()
                .any(|s| s.z < cfg.press_z && dist(s.effector, s.objects[si].pos) <= r_s + cfg.press_tolerance),
            Family::Grasp => {
                last.objects[si].held
                    && dist(last.objects[si].pos, first.objects[si].pos) >= cfg.grasp_displacement
            }
            Family::Push => {
                ti.is_some() && near_target(last) && states.iter().all(|s| !s.objects[si].held)
            }
            Family::PickPlace => {
                ti.is_some()
                    && states.iter().any(|s| s.objects[si].held)
                    && !last.objects[si].held
                    && near_target(last)
            }
        })
    }

    /// Task-agnostic usefulness: did the trajectory accomplish any task that the scene
    /// admits?
    pub fn filter_fn(&self, states: &[WorldState], scene: &Scene) -> FilterResult {
        if states.is_empty() {
            return FilterResult::new(Vec::new());
        }
        let achieved = self
            .enumerate_tasks(scene)
            .into_iter()
            .filter(|t| self.check_success(states, scene, t).unwrap_or(false))
            .collect();
        FilterResult::new(achieved)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Scene, SceneObject, TaskSets, WorldConfig};
    use super::*;

    fn setup() -> (World, TaskSets) {
        let w = World::new(WorldConfig::default(), 2).unwrap();
        let s = TaskSets::generate(&w.config, &w.vocab, 2).unwrap();
        (w, s)
    }

    fn rollout(w: &World, scene: &Scene, actions: &[[f64; 4]]) -> Vec<WorldState> {
        let mut states = vec![w.initial_state(scene)];
        for a in actions {
            let next = w.step(states.last().unwrap(), scene, a);
            states.push(next);
        }
        states
    }

    #[test]
    fn motionless_trajectory_succeeds_at_nothing() {
        let (w, sets) = setup();
        for (i, task) in sets.train.iter().enumerate() {
            let scene = w.sample_scene(task, i as u64).unwrap();
            let states = rollout(&w, &scene, &[[0.0; 4]; 60]);
            assert!(!w.check_success(&states, &scene, task).unwrap(), "{task}");
            assert!(!w.filter_fn(&states, &scene).useful);
        }
    }

    #[test]
    fn push_adjacent_never_held_succeeds() {
        let (w, sets) = setup();
        let task = *sets.train.iter().find(|t| t.family == Family::Push).unwrap();
        let r_s = w.object_type(task.subject).radius;
        let r_t = w.object_type(task.target.unwrap()).radius;
        let scene = Scene {
            objects: vec![
                SceneObject {
                    type_id: task.subject,
                    pos: [0.3, 0.5],
                },
                SceneObject {
                    type_id: task.target.unwrap(),
                    pos: [0.8, 0.5],
                },
            ],
            effector_start: [0.1, 0.5],
        };
        let mut states = rollout(&w, &scene, &[]);
        let mut end = states[0].clone();
        end.objects[0].pos = [0.8 - r_s - r_t - 0.01, 0.5];
        states.push(end);
        assert!(w.check_success(&states, &scene, &task).unwrap());
        // Holding the subject at any step voids a push.
        states[0].objects[0].held = true;
        assert!(!w.check_success(&states, &scene, &task).unwrap());
    }

    #[test]
    fn absent_object_is_an_error() {
        let (w, sets) = setup();
        let task = sets.train[0];
        let other = w.vocab.train.iter().copied().find(|&t| !task.type_ids().any(|x| x == t)).unwrap();
        let scene = Scene {
            objects: vec![SceneObject {
                type_id: other,
                pos: [0.5, 0.5],
            }],
            effector_start: [0.0, 0.0],
        };
        let states = rollout(&w, &scene, &[]);
        assert!(matches!(
            w.check_success(&states, &scene, &task),
            Err(Error::MissingObject { .. })
        ));
    }

    #[test]
    fn touching_a_distractor_button_is_useful() {
        let (w, sets) = setup();
        // Conditioned on a grasp task, the trajectory instead presses the distractor button.
        let grasp = *sets.train.iter().find(|t| t.family == Family::Grasp).unwrap();
        let button = *w.vocab.train.iter().find(|&&i| w.object_type(i).pressable).unwrap();
        let scene = Scene {
            objects: vec![
                SceneObject {
                    type_id: grasp.subject,
                    pos: [0.2, 0.2],
                },
                SceneObject {
                    type_id: button,
                    pos: [0.7, 0.7],
                },
            ],
            effector_start: [0.7, 0.7],
        };
        let states = rollout(&w, &scene, &[[0.0, 0.0, -0.1, 0.0]; 10]);
        assert!(!w.check_success(&states, &scene, &grasp).unwrap());
        let verdict = w.filter_fn(&states, &scene);
        assert!(verdict.useful);
        assert_eq!(verdict.oracle_achieved().len(), 1);
        assert_eq!(verdict.oracle_achieved()[0].family, Family::Press);
        assert_eq!(verdict.oracle_achieved()[0].subject, button);
    }

    #[test]
    fn stripping_labels_keeps_verdict() {
        let f = FilterResult::new(vec![]);
        assert!(!f.useful);
        let g = FilterResult::new(vec![Task {
            family: Family::Press,
            subject: 0,
            target: None,
            split: super::super::Split::Train,
        }]);
        assert!(g.without_labels().useful);
        assert!(g.without_labels().oracle_achieved().is_empty());
    }
}
