//! Trajectories, closed-loop scripted experts and the initial demonstration set.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_for, stream, Rng};
use crate::world::{dist, Action, Family, Scene, Task, World, WorldState, ACTION_DIM};

/// Observation/action sequence recorded in one scene. Row `t` of `obs` is the
/// observation before `actions[t]` was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub scene: Scene,
    obs_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
}

impl Trajectory {
    pub fn new(scene: Scene, obs_dim: usize, obs: Vec<f64>, actions: Vec<f64>) -> Result<Self> {
        let len = actions.len() / ACTION_DIM;
        if len == 0 || actions.len() % ACTION_DIM != 0 || obs.len() != len * obs_dim {
            return Err(Error::InvalidTensor(format!(
                "trajectory with {} observation values, {} action values, obs dim {obs_dim}",
                obs.len(),
                actions.len()
            )));
        }
        if !actions.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite { op: "trajectory" });
        }
        Ok(Trajectory {
            scene,
            obs_dim,
            obs,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Flat `[len, obs_dim]` observations.
    pub fn observations(&self) -> &[f64] {
        &self.obs
    }

    /// Flat `[len, ACTION_DIM]` actions.
    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    HumanProxy,
    PairedTrial,
}

/// Trajectories treated as interchangeable demonstrations of one task. Datasets built
/// by learned pairing carry no task label.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: Option<Task>,
    pub demos: Vec<Arc<Trajectory>>,
    pub provenance: Provenance,
}

impl TaskDataset {
    pub fn label(&self) -> String {
        match &self.task {
            Some(t) => t.to_string(),
            None => "paired-trial".to_string(),
        }
    }
}

/// Anything that can drive the effector for one episode.
pub trait Controller {
    fn act(&mut self, world: &World, state: &WorldState, scene: &Scene, obs: &[f64], rng: &mut Rng) -> Result<Action>;
}

/// A finished episode: the recorded trajectory and all `len + 1` visited states.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub states: Vec<WorldState>,
}

pub fn rollout(world: &World, scene: &Scene, controller: &mut dyn Controller, rng: &mut Rng) -> Result<Rollout> {
    let horizon = world.config.horizon;
    let obs_dim = world.obs_dim();
    let mut obs = Vec::with_capacity(horizon * obs_dim);
    let mut actions = Vec::with_capacity(horizon * ACTION_DIM);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut state = world.initial_state(scene);
    for _ in 0..horizon {
        let o = world.observe(&state, scene);
        let raw = controller.act(world, &state, scene, &o, rng)?;
        let a = clamp_action(world, &raw);
        let next = world.step(&state, scene, &a);
        obs.extend_from_slice(&o);
        actions.extend_from_slice(&a);
        states.push(std::mem::replace(&mut state, next));
    }
    states.push(state);
    Ok(Rollout {
        trajectory: Trajectory::new(scene.clone(), obs_dim, obs, actions)?,
        states,
    })
}

/// The action the world will actually execute.
pub fn clamp_action(world: &World, a: &Action) -> Action {
    let m = world.config.max_delta;
    let mut out = [0.0; ACTION_DIM];
    for (o, &v) in out.iter_mut().zip(a) {
        *o = if v.is_finite() { v.clamp(-m, m) } else { 0.0 };
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub noise_std: f64,
    /// Proportional gain on the horizontal error to the waypoint.
    pub gain: f64,
    pub max_attempts: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            noise_std: 0.005,
            gain: 0.5,
            max_attempts: 20,
        }
    }
}

const XY_TOL: f64 = 0.015;
/// Looser tolerance once the descent has started, within grasp reach.
const LOW_XY_TOL: f64 = 0.03;
const HIGH_Z: f64 = 1.0;
const WORK_Z: f64 = 0.1;
const PRESS_Z: f64 = 0.05;
const RELEASE_Z: f64 = 0.5;
const CARRY_DISTANCE: f64 = 0.2;
const PUSH_STANDOFF: f64 = 0.025;
const PUSH_GAP: f64 = 0.02;
const PUSH_ADVANCE: f64 = 0.05;
const DONE_SLACK: f64 = 0.04;

/// Waypoint the script is currently steering toward: (x, y, z, aperture).
type Waypoint = ([f64; 2], f64, f64);

/// Proportional controller toward the current waypoint of a family-specific script.
pub fn expert_action(world: &World, state: &WorldState, scene: &Scene, task: &Task, config: &ExpertConfig, rng: &mut Rng) -> Result<Action> {
    let (xy, z, g) = expert_waypoint(world, state, scene, task)?;
    let m = world.config.max_delta;
    let noise_std = config.noise_std;
    let mut a = [
        (config.gain * (xy[0] - state.effector[0])).clamp(-m, m),
        (config.gain * (xy[1] - state.effector[1])).clamp(-m, m),
        (z - state.z).clamp(-m, m),
        (g - state.aperture).clamp(-m, m),
    ];
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::config("expert.noise_std", e.to_string()))?;
        a[0] += normal.sample(rng);
        a[1] += normal.sample(rng);
    }
    Ok(clamp_action(world, &a))
}

fn expert_waypoint(world: &World, state: &WorldState, scene: &Scene, task: &Task) -> Result<Waypoint> {
    let missing = |type_id| Error::MissingObject {
        task: task.to_string(),
        type_id,
    };
    let si = scene.index_of(task.subject).ok_or_else(|| missing(task.subject))?;
    let s = state.objects[si].pos;
    let r_s = world.object_type(task.subject).radius;
    let eff = state.effector;
    let here = (eff, state.z, state.aperture);
    let rise = (eff, HIGH_Z, 1.0);

    let target = match task.target {
        Some(t) => {
            let ti = scene.index_of(t).ok_or_else(|| missing(t))?;
            Some((state.objects[ti].pos, world.object_type(t).radius))
        }
        None => None,
    };

    // Approach from above, descend with the gripper open, then close.
    let grasp_script = || -> Waypoint {
        let committed = state.z < 0.9 && dist(eff, s) <= LOW_XY_TOL;
        if dist(eff, s) > XY_TOL && !committed {
            if state.z < 0.9 {
                rise
            } else {
                (s, HIGH_Z, 1.0)
            }
        } else if state.z > WORK_Z + 0.02 {
            (s, WORK_Z, 1.0)
        } else {
            (s, WORK_Z, 0.0)
        }
    };

    Ok(match task.family {
        Family::Press => {
            if dist(eff, s) > XY_TOL {
                if state.z < 0.9 {
                    rise
                } else {
                    (s, HIGH_Z, 1.0)
                }
            } else {
                (s, PRESS_Z, 1.0)
            }
        }
        Family::Grasp => {
            if state.objects[si].held {
                let s0 = scene.objects[si].pos;
                let dy = if s0[1] < 0.5 { CARRY_DISTANCE } else { -CARRY_DISTANCE };
                ([s0[0], s0[1] + dy], HIGH_Z, 0.0)
            } else {
                grasp_script()
            }
        }
        Family::PickPlace => {
            let (t, r_t) = target.expect("pick-place has a target");
            let placed = dist(s, t) <= r_s + r_t + DONE_SLACK;
            if state.objects[si].held {
                if dist(eff, t) > XY_TOL {
                    (t, RELEASE_Z, 0.0)
                } else {
                    (t, RELEASE_Z, 1.0)
                }
            } else if placed {
                rise
            } else {
                grasp_script()
            }
        }
        Family::Push => {
            let (t, r_t) = target.expect("push has a target");
            if dist(s, t) <= r_s + r_t + DONE_SLACK {
                return Ok(here);
            }
            let d = dist(s, t);
            let u = [(t[0] - s[0]) / d, (t[1] - s[1]) / d];
            let contact = world.config.contact_radius;
            let behind_gap = r_s + contact + PUSH_STANDOFF;
            let behind = [s[0] - u[0] * behind_gap, s[1] - u[1] * behind_gap];
            let v = [s[0] - eff[0], s[1] - eff[1]];
            let along = v[0] * u[0] + v[1] * u[1];
            let perp = ((v[0] - along * u[0]).powi(2) + (v[1] - along * u[1]).powi(2)).sqrt();
            let aligned = along > 0.0 && perp < r_s && along < behind_gap + 0.04;
            if state.z <= 0.15 {
                if aligned {
                    // Track the line through subject and target while nudging forward.
                    let remaining = (d - (r_s + r_t + PUSH_GAP)).max(0.0);
                    let lead = r_s + contact - PUSH_ADVANCE.min(remaining);
                    ([s[0] - u[0] * lead, s[1] - u[1] * lead], WORK_Z, 1.0)
                } else {
                    rise
                }
            } else if dist(eff, behind) > XY_TOL {
                if state.z < 0.9 {
                    rise
                } else {
                    (behind, HIGH_Z, 1.0)
                }
            } else {
                (behind, WORK_Z, 1.0)
            }
        }
    })
}

/// Scripted expert for one fixed task.
pub struct ExpertController {
    pub task: Task,
    pub config: ExpertConfig,
}

impl Controller for ExpertController {
    fn act(&mut self, world: &World, state: &WorldState, scene: &Scene, _obs: &[f64], rng: &mut Rng) -> Result<Action> {
        expert_action(world, state, scene, &self.task, &self.config, rng)
    }
}

/// Uniform random actions in the action box.
pub struct RandomController;

impl Controller for RandomController {
    fn act(&mut self, world: &World, _state: &WorldState, _scene: &Scene, _obs: &[f64], rng: &mut Rng) -> Result<Action> {
        let m = world.config.max_delta;
        let mut a = [0.0; ACTION_DIM];
        for v in &mut a {
            *v = rng.gen_range(-m..=m);
        }
        Ok(a)
    }
}

/// Successful expert demonstration of `task` on a scene drawn from `seed`, re-drawn
/// (new scene and noise) until the predicate holds.
pub fn expert_demo(world: &World, task: &Task, config: &ExpertConfig, seed: u64, avoid: &[Scene]) -> Result<Rollout> {
    for attempt in 0..config.max_attempts {
        let mut rng = rng_for(seed, &[attempt as u64]);
        let scene = world.sample_scene_with(task, &mut rng)?;
        if avoid.contains(&scene) {
            continue;
        }
        let mut expert = ExpertController {
            task: *task,
            config: *config,
        };
        let out = rollout(world, &scene, &mut expert, &mut rng)?;
        if world.check_success(&out.states, &scene, task)? {
            return Ok(out);
        }
    }
    Err(Error::ExpertFailure {
        task: task.to_string(),
        attempts: config.max_attempts,
    })
}

/// `demos_per_task` successful expert demos for every task, on pairwise distinct scenes.
pub fn collect_demos(world: &World, tasks: &[Task], demos_per_task: usize, config: &ExpertConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    if demos_per_task < 2 {
        return Err(Error::config("demos_per_task", "one-shot pairs need at least 2 demos per task"));
    }
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut scenes: Vec<Scene> = Vec::with_capacity(demos_per_task);
            let mut demos = Vec::with_capacity(demos_per_task);
            for j in 0..demos_per_task {
                let demo_seed = crate::seeding::derive_seed(seed, &[stream::DEMOS, i as u64, j as u64]);
                let out = expert_demo(world, task, config, demo_seed, &scenes)?;
                scenes.push(out.trajectory.scene.clone());
                demos.push(Arc::new(out.trajectory));
            }
            Ok(TaskDataset {
                task: Some(*task),
                demos,
                provenance: Provenance::HumanProxy,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{TaskSets, WorldConfig};

    fn setup(seed: u64) -> (World, TaskSets) {
        let w = World::new(WorldConfig::default(), seed).unwrap();
        let s = TaskSets::generate(&w.config, &w.vocab, seed).unwrap();
        (w, s)
    }

    #[test]
    fn experts_succeed_on_nearly_every_seed() {
        let (w, sets) = setup(0);
        let cfg = ExpertConfig::default();
        for family in Family::ALL {
            let tasks: Vec<&Task> = sets.train.iter().chain(&sets.test).filter(|t| t.family == family).collect();
            let mut wins = 0;
            let n = 100;
            for k in 0..n {
                let task = tasks[k % tasks.len()];
                let mut rng = rng_for(99, &[k as u64, family.index() as u64]);
                let scene = w.sample_scene_with(task, &mut rng).unwrap();
                let mut expert = ExpertController {
                    task: *task,
                    config: cfg,
                };
                let out = rollout(&w, &scene, &mut expert, &mut rng).unwrap();
                wins += usize::from(w.check_success(&out.states, &scene, task).unwrap());
            }
            assert!(wins >= 95, "{family:?}: {wins}/{n}");
        }
    }

    #[test]
    fn grasp_descends_once_despite_noise() {
        let (w, sets) = setup(2);
        let cfg = ExpertConfig::default();
        let tasks: Vec<&Task> = sets.train.iter().filter(|t| t.family == Family::PickPlace).collect();
        for k in 0..40 {
            let task = tasks[k % tasks.len()];
            let mut rng = rng_for(7, &[k as u64]);
            let scene = w.sample_scene_with(task, &mut rng).unwrap();
            let mut expert = ExpertController { task: *task, config: cfg };
            let out = rollout(&w, &scene, &mut expert, &mut rng).unwrap();
            let si = scene.index_of(task.subject).unwrap();
            let grabbed = out.states.iter().position(|s| s.objects[si].held).expect("never grasped");
            let descents = out.states[..grabbed]
                .windows(2)
                .filter(|p| p[0].z >= 0.9 && p[1].z < 0.9)
                .count();
            assert_eq!(descents, 1, "episode {k}");
        }
    }

    #[test]
    fn pick_place_holds_then_releases_near_target() {
        let (w, sets) = setup(1);
        let task = *sets.train.iter().find(|t| t.family == Family::PickPlace).unwrap();
        let out = expert_demo(&w, &task, &ExpertConfig::default(), 5, &[]).unwrap();
        let si = out.trajectory.scene.index_of(task.subject).unwrap();
        let held: Vec<bool> = out.states.iter().map(|s| s.objects[si].held).collect();
        let first = held.iter().position(|&h| h).expect("never held");
        let last = held.iter().rposition(|&h| h).unwrap();
        assert!(first <= last && held[first..=last].iter().all(|&h| h));
        assert!(!held.last().unwrap());
    }

    #[test]
    fn action_at_final_waypoint_is_near_zero() {
        let (w, sets) = setup(2);
        let cfg = ExpertConfig::default();
        for task in sets.train.iter().take(20) {
            let out = expert_demo(&w, task, &cfg, 11, &[]).unwrap();
            let last = out.states.last().unwrap();
            let mut rng = rng_for(0, &[]);
            let a = expert_action(&w, last, &out.trajectory.scene, task, &cfg, &mut rng).unwrap();
            // Five standard deviations of the xy noise.
            assert!(a.iter().all(|v| v.abs() <= 5.0 * cfg.noise_std), "{task}: {a:?}");
        }
    }

    #[test]
    fn demos_are_successful_distinct_and_deterministic() {
        let (w, sets) = setup(3);
        let cfg = ExpertConfig::default();
        let tasks = &sets.train[..12];
        let a = collect_demos(&w, tasks, 4, &cfg, 8).unwrap();
        let b = collect_demos(&w, tasks, 4, &cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|d| d.demos.len()).sum::<usize>(), 48);
        for ds in &a {
            let task = ds.task.unwrap();
            for (i, d) in ds.demos.iter().enumerate() {
                assert_eq!(d.len(), w.config.horizon);
                for e in &ds.demos[i + 1..] {
                    assert_ne!(d.scene, e.scene);
                }
                let states = replay(&w, d);
                assert!(w.check_success(&states, &d.scene, &task).unwrap());
            }
        }
    }

    #[test]
    fn too_few_demos_rejected() {
        let (w, sets) = setup(0);
        assert!(collect_demos(&w, &sets.train[..1], 1, &ExpertConfig::default(), 0).is_err());
    }

    #[test]
    fn random_controller_rarely_succeeds() {
        let (w, sets) = setup(4);
        for family in Family::ALL {
            let tasks: Vec<&Task> = sets.train.iter().filter(|t| t.family == family).collect();
            let mut wins = 0;
            for k in 0..100 {
                let task = tasks[k % tasks.len()];
                let mut rng = rng_for(7, &[k as u64, family.index() as u64]);
                let scene = w.sample_scene_with(task, &mut rng).unwrap();
                let out = rollout(&w, &scene, &mut RandomController, &mut rng).unwrap();
                wins += usize::from(w.check_success(&out.states, &scene, task).unwrap());
            }
            assert!(wins < 5, "{family:?}: {wins}/100");
        }
    }

    fn replay(w: &World, traj: &Trajectory) -> Vec<WorldState> {
        let mut states = vec![w.initial_state(&traj.scene)];
        for t in 0..traj.len() {
            let a: Action = traj.action(t).try_into().unwrap();
            let next = w.step(states.last().unwrap(), &traj.scene, &a);
            states.push(next);
        }
        states
    }
}
