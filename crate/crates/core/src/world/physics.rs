use super::{dist, Action, Scene, World, WorldState};

const GRIP_THRESHOLD: f64 = 0.5;
/// Pushed objects are left just outside the contact disc.
const PUSH_CLEARANCE: f64 = 1e-9;
const PUSH_SUBSTEPS: usize = 10;

impl World {
    /// Advances one step. Action components are clamped to `±max_delta`; non-finite
    /// components count as zero.
    pub fn step(&self, state: &WorldState, scene: &Scene, action: &Action) -> WorldState {
        let cfg = &self.config;
        let a: Vec<f64> = action
            .iter()
            .map(|&v| if v.is_finite() { v.clamp(-cfg.max_delta, cfg.max_delta) } else { 0.0 })
            .collect();
        let mut next = state.clone();
        next.effector = [
            (state.effector[0] + a[0]).clamp(0.0, 1.0),
            (state.effector[1] + a[1]).clamp(0.0, 1.0),
        ];
        next.z = (state.z + a[2]).clamp(0.0, 1.0);
        next.aperture = (state.aperture + a[3]).clamp(0.0, 1.0);
        next.t = state.t + 1;

        let opened = state.aperture <= GRIP_THRESHOLD && next.aperture > GRIP_THRESHOLD;
        let closed = state.aperture > GRIP_THRESHOLD && next.aperture <= GRIP_THRESHOLD;

        if let Some(h) = next.held_index() {
            next.objects[h].pos = next.effector;
            if opened {
                next.objects[h].held = false;
            }
        } else if closed && next.z < cfg.low_z {
            let reachable = scene
                .objects
                .iter()
                .zip(&next.objects)
                .enumerate()
                .filter(|(_, (o, _))| self.object_type(o.type_id).graspable)
                .map(|(i, (o, s))| (i, dist(s.pos, next.effector), self.object_type(o.type_id).radius))
                .filter(|&(_, d, r)| d <= r + cfg.grasp_reach)
                .min_by(|x, y| x.1.total_cmp(&y.1));
            if let Some((i, _, _)) = reachable {
                next.objects[i].held = true;
                next.objects[i].pos = next.effector;
            }
        }

        // Open and low: objects the effector newly runs into are shoved out of the way.
        // Objects it was already over (e.g. when descending onto them) stay put. The
        // sweep is subdivided so a fast move cannot tunnel through an object.
        if next.z < cfg.low_z && next.aperture > GRIP_THRESHOLD {
            let from = state.effector;
            let to = next.effector;
            for k in 1..=PUSH_SUBSTEPS {
                let f_prev = (k - 1) as f64 / PUSH_SUBSTEPS as f64;
                let f_cur = k as f64 / PUSH_SUBSTEPS as f64;
                let lerp = |f: f64| [from[0] + f * (to[0] - from[0]), from[1] + f * (to[1] - from[1])];
                let (e_prev, e_cur) = (lerp(f_prev), if k == PUSH_SUBSTEPS { to } else { lerp(f_cur) });
                for (i, obj) in scene.objects.iter().enumerate() {
                    let ty = self.object_type(obj.type_id);
                    if !ty.graspable || next.objects[i].held {
                        continue;
                    }
                    let reach = ty.radius + cfg.contact_radius;
                    let pos = next.objects[i].pos;
                    let d_cur = dist(pos, e_cur);
                    if d_cur < reach && dist(pos, e_prev) >= reach {
                        let (ux, uy) = if d_cur > 1e-12 {
                            ((pos[0] - e_cur[0]) / d_cur, (pos[1] - e_cur[1]) / d_cur)
                        } else {
                            let m = dist(from, to);
                            if m > 0.0 {
                                ((to[0] - from[0]) / m, (to[1] - from[1]) / m)
                            } else {
                                (1.0, 0.0)
                            }
                        };
                        let push_to = reach + PUSH_CLEARANCE;
                        next.objects[i].pos = [
                            (e_cur[0] + ux * push_to).clamp(0.0, 1.0),
                            (e_cur[1] + uy * push_to).clamp(0.0, 1.0),
                        ];
                    }
                }
            }
        }

        for (i, obj) in scene.objects.iter().enumerate() {
            let ty = self.object_type(obj.type_id);
            if ty.pressable
                && next.z < cfg.press_z
                && dist(next.objects[i].pos, next.effector) <= ty.radius + cfg.press_tolerance
            {
                next.objects[i].pressed = true;
            }
        }
        next
    }
}
