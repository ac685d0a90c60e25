//! 2D kinematic tabletop: typed objects, a 4-DoF effector (x, y, height, aperture),
//! four task families with success predicates, and the task-agnostic usefulness filter.

mod physics;
mod scene;
mod success;
mod tasks;

use serde::{Deserialize, Serialize};

pub use success::FilterResult;
pub use tasks::{TaskSets, Vocabulary};

use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 6;
pub const EFFECTOR_DIMS: usize = 4;
/// present, feature(6), x, y, held, pressed
pub const SLOT_DIMS: usize = 1 + FEATURE_DIM + 2 + 1 + 1;
pub const ACTION_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub train_types: usize,
    pub val_types: usize,
    /// Fraction of each type partition that are (immovable, pressable) buttons.
    pub button_fraction: f64,
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    pub slots: usize,
    pub horizon: usize,
    pub max_distractors: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Object centers are sampled inside `[margin, 1 - margin]`.
    pub placement_margin: f64,
    /// Extra gap beyond the sum of radii between sampled object centers.
    pub separation_margin: f64,
    pub max_delta: f64,
    pub contact_radius: f64,
    pub grasp_reach: f64,
    pub low_z: f64,
    pub press_z: f64,
    pub press_tolerance: f64,
    pub place_tolerance: f64,
    pub grasp_displacement: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab_size: 30,
            train_types: 20,
            val_types: 5,
            button_fraction: 0.4,
            train_tasks: 80,
            val_tasks: 10,
            test_tasks: 10,
            slots: 4,
            horizon: 60,
            max_distractors: 2,
            radius_min: 0.04,
            radius_max: 0.06,
            placement_margin: 0.15,
            separation_margin: 0.1,
            max_delta: 0.1,
            contact_radius: 0.03,
            grasp_reach: 0.03,
            low_z: 0.3,
            press_z: 0.15,
            press_tolerance: 0.02,
            place_tolerance: 0.05,
            grasp_displacement: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn test_types(&self) -> usize {
        self.vocab_size.saturating_sub(self.train_types + self.val_types)
    }

    pub fn obs_dim(&self) -> usize {
        EFFECTOR_DIMS + self.slots * SLOT_DIMS
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("world.{field}"), reason))
            }
        };
        check(self.train_types >= 2, "train_types", "need at least 2 training types")?;
        check(self.val_types >= 2, "val_types", "need at least 2 validation types")?;
        check(self.test_types() >= 2, "vocab_size", "leaves fewer than 2 test types")?;
        check(
            self.button_fraction > 0.0 && self.button_fraction < 1.0,
            "button_fraction",
            "must lie in (0, 1)",
        )?;
        check(self.train_tasks >= 4, "train_tasks", "every family needs a task")?;
        check(self.val_tasks >= 4, "val_tasks", "every family needs a task")?;
        check(self.test_tasks >= 4, "test_tasks", "every family needs a task")?;
        check(self.slots >= 2 + self.max_distractors, "slots", "too few slots for subject, target and distractors")?;
        check(self.horizon >= 2, "horizon", "must be at least 2")?;
        check(
            self.radius_min > 0.0 && self.radius_max >= self.radius_min,
            "radius_min",
            "need 0 < radius_min <= radius_max",
        )?;
        check(
            self.placement_margin >= self.radius_max && self.placement_margin < 0.5,
            "placement_margin",
            "must cover the largest radius and leave room",
        )?;
        check(self.separation_margin >= 0.02, "separation_margin", "must be at least 0.02")?;
        check(self.max_delta > 0.0, "max_delta", "must be positive")?;
        for (v, name) in [
            (self.contact_radius, "contact_radius"),
            (self.grasp_reach, "grasp_reach"),
            (self.low_z, "low_z"),
            (self.press_z, "press_z"),
            (self.press_tolerance, "press_tolerance"),
            (self.place_tolerance, "place_tolerance"),
            (self.grasp_displacement, "grasp_displacement"),
        ] {
            check(v.is_finite() && v > 0.0, name, "must be positive")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectType {
    pub id: usize,
    pub feature: [f64; FEATURE_DIM],
    pub pressable: bool,
    pub graspable: bool,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Press,
    Grasp,
    Push,
    PickPlace,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Press, Family::Grasp, Family::Push, Family::PickPlace];

    pub fn has_target(self) -> bool {
        matches!(self, Family::Push | Family::PickPlace)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Press => "press",
            Family::Grasp => "grasp",
            Family::Push => "push",
            Family::PickPlace => "pick-place",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A family applied to a subject type (and a target type for push / pick-place).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub family: Family,
    pub subject: usize,
    pub target: Option<usize>,
    pub split: Split,
}

impl Task {
    pub fn type_ids(&self) -> impl Iterator<Item = usize> {
        std::iter::once(self.subject).chain(self.target)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.target {
            Some(t) => write!(f, "{}({}->{})", self.family.name(), self.subject, t),
            None => write!(f, "{}({})", self.family.name(), self.subject),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub type_id: usize,
    pub pos: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub effector_start: [f64; 2],
}

impl Scene {
    pub fn index_of(&self, type_id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.type_id == type_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectState {
    pub pos: [f64; 2],
    pub held: bool,
    pub pressed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub effector: [f64; 2],
    pub z: f64,
    pub aperture: f64,
    pub objects: Vec<ObjectState>,
    pub t: usize,
}

impl WorldState {
    pub fn held_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }
}

pub type Action = [f64; ACTION_DIM];

/// The simulator: configuration plus the object vocabulary for one world seed.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::generate(&config, seed);
        Ok(World { config, vocab })
    }

    pub fn object_type(&self, id: usize) -> &ObjectType {
        &self.vocab.types[id]
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn initial_state(&self, scene: &Scene) -> WorldState {
        WorldState {
            effector: scene.effector_start,
            z: 1.0,
            aperture: 1.0,
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectState {
                    pos: o.pos,
                    held: false,
                    pressed: false,
                })
                .collect(),
            t: 0,
        }
    }

    /// Flat observation: effector channels followed by fixed object slots.
    pub fn observe(&self, state: &WorldState, scene: &Scene) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim()];
        obs[..EFFECTOR_DIMS].copy_from_slice(&[state.effector[0], state.effector[1], state.z, state.aperture]);
        for (slot, (obj, os)) in scene.objects.iter().zip(&state.objects).take(self.config.slots).enumerate() {
            let base = EFFECTOR_DIMS + slot * SLOT_DIMS;
            let ty = self.object_type(obj.type_id);
            obs[base] = 1.0;
            obs[base + 1..base + 1 + FEATURE_DIM].copy_from_slice(&ty.feature);
            obs[base + 1 + FEATURE_DIM] = os.pos[0];
            obs[base + 2 + FEATURE_DIM] = os.pos[1];
            obs[base + 3 + FEATURE_DIM] = f64::from(u8::from(os.held));
            obs[base + 4 + FEATURE_DIM] = f64::from(u8::from(os.pressed));
        }
        obs
    }

    /// Tasks whose objects are in the scene and whose family fits the object kinds.
    pub fn enumerate_tasks(&self, scene: &Scene) -> Vec<Task> {
        let mut out = Vec::new();
        for subj in &scene.objects {
            let st = self.object_type(subj.type_id);
            let split = self.vocab.split_of(subj.type_id);
            if st.pressable {
                out.push(Task {
                    family: Family::Press,
                    subject: subj.type_id,
                    target: None,
                    split,
                });
            }
            if st.graspable {
                out.push(Task {
                    family: Family::Grasp,
                    subject: subj.type_id,
                    target: None,
                    split,
                });
                for tgt in scene.objects.iter().filter(|o| o.type_id != subj.type_id) {
                    for family in [Family::Push, Family::PickPlace] {
                        out.push(Task {
                            family,
                            subject: subj.type_id,
                            target: Some(tgt.type_id),
                            split,
                        });
                    }
                }
            }
        }
        out.sort();
        out
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
