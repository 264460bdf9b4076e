//! Deterministic 2D tabletop with occlusion-after-placement and perceptual
//! aliasing.
//!
//! The gripper moves in the unit square. Objects are grasped by closing the
//! gripper within [`GRASP_RADIUS`] and delivered by opening it within
//! [`GOAL_RADIUS`] of the goal; delivered objects vanish from the rendered
//! view. The arm is immobile for `settle_steps` after reset and after each
//! correct placement, so a scene can stay visually static for longer than a
//! short observation window. In aliased tasks a look-alike of the first target
//! hides underneath it: the scene after delivering the first target renders
//! exactly like the scene at reset.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

mod dataset;
mod expert;
mod render;
mod task;

pub use dataset::{
    episode_task, generate_dataset, load_dataset, record_expert_episode, DatasetConfig,
    DatasetManifest, EpisodeRecord, GT_DIM,
};
pub use expert::{expert_action, rollout_expert, EXPERT_NOISE_STD};
pub use render::{augment, render, render_image, render_mode, AugmentParams, RenderMode, PALETTE};
pub use task::{
    token_id, token_word, Instruction, ObjectKind, TaskFamily, TaskKind, TaskSpec, COLOR_NAMES,
    MAX_INSTRUCTION_LEN, N_COLORS, N_SHAPES, PAD_TOKEN, VOCAB,
};

pub const IMG_SIDE: usize = 32;
pub const IMG_CHANNELS: usize = 3;
pub const IMG_LEN: usize = IMG_SIDE * IMG_SIDE * IMG_CHANNELS;
pub const PROPRIO_DIM: usize = 6;
pub const ACTION_DIM: usize = 3;
pub const DELTA_MAX: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.03;
pub const GOAL_RADIUS: f64 = 0.05;
pub const MIN_SEPARATION: f64 = 0.1;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const MAX_OBJECTS: usize = 4;
pub const WORKSPACE_CENTER: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub pos: [f64; 2],
    pub color_id: usize,
    pub shape_id: usize,
    pub placed: bool,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper_pos: [f64; 2],
    pub gripper_vel: [f64; 2],
    pub grip_closed: bool,
    pub held_object: Option<usize>,
    pub objects: Vec<ObjectState>,
    pub step_count: usize,
    pub task: Arc<TaskSpec>,
    /// Number of targets delivered so far, in order.
    pub progress: usize,
    /// Remaining immobile steps.
    pub settle_remaining: usize,
    /// A wrong object was delivered.
    pub failed: bool,
}

impl WorldState {
    pub fn success(&self) -> bool {
        !self.failed && self.progress == self.task.targets.len()
    }

    pub fn is_terminal(&self) -> bool {
        self.failed || self.success() || self.step_count >= self.task.horizon
    }

    /// Index of the next object to deliver, if any.
    pub fn next_target(&self) -> Option<usize> {
        self.task.targets.get(self.progress).copied()
    }

    /// Compact ground-truth summary used only by analysis code.
    pub fn summary(&self) -> [f32; GT_DIM] {
        let mut g = [0f32; GT_DIM];
        g[0] = self.gripper_pos[0] as f32;
        g[1] = self.gripper_pos[1] as f32;
        g[2] = self.gripper_vel[0] as f32;
        g[3] = self.gripper_vel[1] as f32;
        g[4] = f32::from(u8::from(self.grip_closed));
        g[5] = f32::from(u8::from(self.held_object.is_some()));
        g[6] = self.progress as f32 / self.task.targets.len() as f32;
        g[7] = if self.task.settle_steps > 0 {
            self.settle_remaining as f32 / self.task.settle_steps as f32
        } else {
            0.0
        };
        for (i, o) in self.objects.iter().take(MAX_OBJECTS).enumerate() {
            g[8 + 3 * i] = o.pos[0] as f32;
            g[9 + 3 * i] = o.pos[1] as f32;
            g[10 + 3 * i] = f32::from(u8::from(o.placed));
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Row-major `[32, 32, 3]` RGB image.
    pub image: Vec<u8>,
    /// Gripper x, y, vx, vy, grip state, holding-force proxy.
    pub proprio: [f32; PROPRIO_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub delta: [f64; 2],
    pub grip_cmd: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, grip_cmd: f64) -> Self {
        Self {
            delta: [dx, dy],
            grip_cmd,
        }
    }

    /// Clip every component into bounds; non-finite values become zero.
    pub fn clipped(self) -> Self {
        let c = |v: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) } else { 0.0 };
        Self {
            delta: [
                c(self.delta[0], -DELTA_MAX, DELTA_MAX),
                c(self.delta[1], -DELTA_MAX, DELTA_MAX),
            ],
            grip_cmd: c(self.grip_cmd, 0.0, 1.0),
        }
    }

    pub fn to_array(self) -> [f32; ACTION_DIM] {
        [
            self.delta[0] as f32,
            self.delta[1] as f32,
            self.grip_cmd as f32,
        ]
    }

    pub fn from_slice(a: &[f32]) -> Self {
        Self::new(f64::from(a[0]), f64::from(a[1]), f64::from(a[2]))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Proprioceptive vector rescaled to roughly unit range for network inputs.
pub fn proprio_features(p: &[f32; PROPRIO_DIM]) -> [f32; PROPRIO_DIM] {
    let dm = DELTA_MAX as f32;
    [
        (p[0] - 0.5) * 2.0,
        (p[1] - 0.5) * 2.0,
        p[2] / dm,
        p[3] / dm,
        p[4] * 2.0 - 1.0,
        p[5] * 2.0 - 1.0,
    ]
}

/// Action rescaled to roughly unit range for network inputs.
pub fn action_features(a: &[f32; ACTION_DIM]) -> [f32; ACTION_DIM] {
    let dm = DELTA_MAX as f32;
    [a[0] / dm, a[1] / dm, a[2] * 2.0 - 1.0]
}

/// Initial state: objects uniformly placed with pairwise separation
/// [`MIN_SEPARATION`] (also kept clear of the goal and the gripper start),
/// gripper at the workspace centre. Deterministic in `(task, seed)`.
pub fn reset(task: &TaskSpec, seed: u64) -> Result<(WorldState, Observation)> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = task.twin.map(|(_, h)| h);
    let mut positions: Vec<Option<[f64; 2]>> = vec![None; task.objects.len()];
    let mut keep_clear = vec![WORKSPACE_CENTER, task.goal_pos];
    let mut attempts = 0;
    for (i, slot) in positions.iter_mut().enumerate() {
        if Some(i) == hidden {
            continue;
        }
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not place {} objects with separation {MIN_SEPARATION} in {MAX_PLACEMENT_ATTEMPTS} attempts",
                    task.objects.len()
                )));
            }
            let p = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            if keep_clear.iter().all(|&q| dist(p, q) >= MIN_SEPARATION) {
                keep_clear.push(p);
                *slot = Some(p);
                break;
            }
        }
    }
    if let Some((top, h)) = task.twin {
        positions[h] = positions[top];
    }
    let objects = task
        .objects
        .iter()
        .zip(positions)
        .map(|(k, p)| ObjectState {
            pos: p.expect("every object positioned"),
            color_id: k.color_id,
            shape_id: k.shape_id,
            placed: false,
            occluded: false,
        })
        .collect();
    let mut state = WorldState {
        gripper_pos: WORKSPACE_CENTER,
        gripper_vel: [0.0, 0.0],
        grip_closed: false,
        held_object: None,
        objects,
        step_count: 0,
        task: Arc::new(task.clone()),
        progress: 0,
        settle_remaining: task.settle_steps,
        failed: false,
    };
    update_occlusion(&mut state);
    let obs = render(&state);
    Ok((state, obs))
}

/// Objects resting exactly on top of an earlier-indexed object are hidden;
/// delivered objects are always hidden.
fn update_occlusion(state: &mut WorldState) {
    let held = state.held_object;
    let snapshot: Vec<([f64; 2], bool)> = state.objects.iter().map(|o| (o.pos, o.placed)).collect();
    for (j, o) in state.objects.iter_mut().enumerate() {
        o.occluded = if o.placed {
            true
        } else if Some(j) == held {
            false
        } else {
            snapshot[..j]
                .iter()
                .enumerate()
                .any(|(i, &(p, placed))| !placed && Some(i) != held && dist(p, o.pos) < 1e-9)
        };
    }
}

/// Advance one control step. Out-of-range actions are clipped, never
/// rejected. Returns the next state, its observation and whether the episode
/// has ended.
pub fn step(state: &WorldState, action: Action) -> Result<(WorldState, Observation, bool)> {
    if state.is_terminal() {
        return Err(Error::Precondition("step called on a terminal state".into()));
    }
    let a = action.clipped();
    let mut s = state.clone();
    s.step_count += 1;
    if s.settle_remaining > 0 {
        s.settle_remaining -= 1;
        s.gripper_vel = [0.0, 0.0];
    } else {
        let new_pos = [
            (s.gripper_pos[0] + a.delta[0]).clamp(0.0, 1.0),
            (s.gripper_pos[1] + a.delta[1]).clamp(0.0, 1.0),
        ];
        s.gripper_vel = [new_pos[0] - s.gripper_pos[0], new_pos[1] - s.gripper_pos[1]];
        s.gripper_pos = new_pos;
        s.grip_closed = a.grip_cmd > 0.5;
        if let Some(h) = s.held_object {
            s.objects[h].pos = s.gripper_pos;
            if !s.grip_closed {
                s.held_object = None;
                if dist(s.gripper_pos, s.task.goal_pos) <= GOAL_RADIUS {
                    s.objects[h].placed = true;
                    if s.next_target() == Some(h) {
                        s.progress += 1;
                        if !s.success() {
                            s.settle_remaining = s.task.settle_steps;
                        }
                    } else {
                        s.failed = true;
                    }
                }
            }
        } else if s.grip_closed {
            let pos = s.gripper_pos;
            let candidate = s
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| !o.placed && !o.occluded)
                .map(|(i, o)| (i, dist(o.pos, pos)))
                .filter(|&(_, d)| d <= GRASP_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = candidate {
                s.held_object = Some(i);
                s.objects[i].pos = pos;
            }
        }
    }
    update_occlusion(&mut s);
    let obs = render(&s);
    let done = s.is_terminal();
    Ok((s, obs, done))
}
