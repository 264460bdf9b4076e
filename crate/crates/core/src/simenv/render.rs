use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Observation, TaskFamily, WorldState, IMG_CHANNELS, IMG_LEN, IMG_SIDE, PROPRIO_DIM,
};

const BACKGROUND: [u8; 3] = [30, 30, 30];
const BIN: [u8; 3] = [96, 96, 96];
const GRIPPER_OPEN: [u8; 3] = [255, 255, 255];
const GRIPPER_CLOSED: [u8; 3] = [170, 170, 170];
pub const PALETTE: [[u8; 3]; 4] = [[220, 40, 40], [40, 200, 60], [50, 90, 230], [230, 210, 40]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub max_shift: i32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            brightness: 20.0,
            contrast: 0.2,
            noise_std: 0.02 * 255.0,
            max_shift: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderMode {
    Eval,
    /// Training-time photometric jitter, noise and a small shift, seeded.
    Train { seed: u64 },
}

fn to_px(v: f64) -> i32 {
    ((v * IMG_SIDE as f64).floor() as i32).clamp(0, IMG_SIDE as i32 - 1)
}

fn put(img: &mut [u8], x: i32, y: i32, c: [u8; 3]) {
    if (0..IMG_SIDE as i32).contains(&x) && (0..IMG_SIDE as i32).contains(&y) {
        let o = (y as usize * IMG_SIDE + x as usize) * IMG_CHANNELS;
        img[o..o + 3].copy_from_slice(&c);
    }
}

/// Axis-aligned square of side `side` whose top-left is `(cx - side/2, cy - side/2)`.
fn square(img: &mut [u8], cx: i32, cy: i32, side: i32, hollow: bool, c: [u8; 3]) {
    let h = side / 2;
    for dy in 0..side {
        for dx in 0..side {
            let edge = dx == 0 || dy == 0 || dx == side - 1 || dy == side - 1;
            if !hollow || edge {
                put(img, cx - h + dx, cy - h + dy, c);
            }
        }
    }
}

/// Pixels of the clean rendering: goal marker, visible objects, gripper cross.
pub fn render_image(state: &WorldState) -> Vec<u8> {
    let mut img = vec![0u8; IMG_LEN];
    for px in img.chunks_exact_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    let task = &state.task;
    let (gx, gy) = (to_px(task.goal_pos[0]), to_px(task.goal_pos[1]));
    match task.family {
        TaskFamily::PickPlace => square(&mut img, gx, gy, 6, true, BIN),
        TaskFamily::Stack => {
            let c = PALETTE[task.base_color.unwrap_or(0)];
            square(&mut img, gx, gy, 6, true, c);
        }
    }
    for o in state.objects.iter().filter(|o| !o.placed && !o.occluded) {
        let (x, y) = (to_px(o.pos[0]), to_px(o.pos[1]));
        square(&mut img, x, y, 4, o.shape_id == 1, PALETTE[o.color_id]);
    }
    let (x, y) = (to_px(state.gripper_pos[0]), to_px(state.gripper_pos[1]));
    let c = if state.grip_closed { GRIPPER_CLOSED } else { GRIPPER_OPEN };
    for d in -2..=2 {
        put(&mut img, x + d, y, c);
        put(&mut img, x, y + d, c);
    }
    img
}

fn proprio(state: &WorldState) -> [f32; PROPRIO_DIM] {
    [
        state.gripper_pos[0] as f32,
        state.gripper_pos[1] as f32,
        state.gripper_vel[0] as f32,
        state.gripper_vel[1] as f32,
        f32::from(u8::from(state.grip_closed)),
        f32::from(u8::from(state.held_object.is_some())),
    ]
}

/// Clean observation of a state.
pub fn render(state: &WorldState) -> Observation {
    render_mode(state, RenderMode::Eval)
}

pub fn render_mode(state: &WorldState, mode: RenderMode) -> Observation {
    let mut image = render_image(state);
    if let RenderMode::Train { seed } = mode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        image = augment(&image, &AugmentParams::default(), &mut rng);
    }
    Observation {
        image,
        proprio: proprio(state),
    }
}

/// Brightness/contrast jitter, additive Gaussian noise and a shift of up to
/// `max_shift` pixels with edge replication.
pub fn augment<R: Rng>(image: &[u8], p: &AugmentParams, rng: &mut R) -> Vec<u8> {
    let b = rng.random_range(-p.brightness..=p.brightness);
    let c = 1.0 + rng.random_range(-p.contrast..=p.contrast);
    let sx = rng.random_range(-p.max_shift..=p.max_shift);
    let sy = rng.random_range(-p.max_shift..=p.max_shift);
    let noise = Normal::new(0.0, p.noise_std.max(1e-12)).expect("valid std");
    let side = IMG_SIDE as i32;
    let mut out = vec![0u8; image.len()];
    for y in 0..side {
        for x in 0..side {
            let srcx = (x - sx).clamp(0, side - 1) as usize;
            let srcy = (y - sy).clamp(0, side - 1) as usize;
            for ch in 0..IMG_CHANNELS {
                let v = f64::from(image[(srcy * IMG_SIDE + srcx) * IMG_CHANNELS + ch]);
                let n = if p.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                let v = (v - 128.0) * c + 128.0 + b + n;
                out[(y as usize * IMG_SIDE + x as usize) * IMG_CHANNELS + ch] =
                    v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{reset, step, Action, TaskKind, TaskSpec, GRASP_RADIUS};

    fn state(aliased: bool) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = TaskSpec::generate(TaskKind::PpN, aliased, 0, 200, 0, &mut rng).unwrap();
        reset(&t, 4).unwrap().0
    }

    fn object_pixels(img: &[u8], color: [u8; 3]) -> usize {
        img.chunks_exact(3).filter(|p| *p == color).count()
    }

    #[test]
    fn placed_object_contributes_no_pixels() {
        let mut s = state(false);
        let c = PALETTE[s.objects[0].color_id];
        assert!(object_pixels(&render_image(&s), c) > 0);
        s.objects[0].placed = true;
        s.objects[0].occluded = true;
        let img = render_image(&s);
        assert_eq!(object_pixels(&img, c), 0);
        // region of the object equals background
        let (x, y) = (to_px(s.objects[0].pos[0]), to_px(s.objects[0].pos[1]));
        let o = (y as usize * IMG_SIDE + x as usize) * 3;
        assert_eq!(&img[o..o + 3], &BACKGROUND);
    }

    #[test]
    fn eval_mode_is_pure_and_train_mode_is_seeded() {
        let s = state(true);
        assert_eq!(render(&s), render(&s));
        let a = render_mode(&s, RenderMode::Train { seed: 5 });
        let b = render_mode(&s, RenderMode::Train { seed: 5 });
        let c = render_mode(&s, RenderMode::Train { seed: 6 });
        assert_eq!(a, b);
        assert_ne!(a.image, c.image);
        assert_ne!(a.image, render(&s).image);
    }

    /// The scene after delivering the first target renders like the scene at
    /// reset, apart from the gripper cross and the goal marker.
    #[test]
    fn aliased_scene_repeats_after_first_delivery() {
        let s0 = state(true);
        let first = s0.task.targets[0];
        let mut s = s0.clone();
        s.settle_remaining = 0;
        // walk to the first target, grasp it, carry it to the goal, release
        let drive = |s: &mut WorldState, dest: [f64; 2], grip: f64| {
            for _ in 0..100 {
                let d = [dest[0] - s.gripper_pos[0], dest[1] - s.gripper_pos[1]];
                if d[0].hypot(d[1]) < 1e-9 {
                    break;
                }
                *s = step(s, Action::new(d[0], d[1], grip)).unwrap().0;
            }
        };
        drive(&mut s, s0.objects[first].pos, 0.0);
        assert!(s.gripper_pos[0] - s0.objects[first].pos[0] < GRASP_RADIUS);
        s = step(&s, Action::new(0.0, 0.0, 1.0)).unwrap().0;
        assert_eq!(s.held_object, Some(first));
        drive(&mut s, s0.task.goal_pos, 1.0);
        s = step(&s, Action::new(0.0, 0.0, 0.0)).unwrap().0;
        assert!(s.objects[first].placed);
        let before = render_image(&s0);
        let after = render_image(&s);
        let mask = |x: i32, y: i32| {
            let near = |p: [f64; 2]| (x - to_px(p[0])).abs() <= 3 && (y - to_px(p[1])).abs() <= 3;
            near(s0.gripper_pos) || near(s.gripper_pos) || near(s0.task.goal_pos)
        };
        for y in 0..IMG_SIDE as i32 {
            for x in 0..IMG_SIDE as i32 {
                if mask(x, y) {
                    continue;
                }
                let o = (y as usize * IMG_SIDE + x as usize) * 3;
                assert_eq!(before[o..o + 3], after[o..o + 3], "pixel ({x},{y}) differs");
            }
        }
    }
}
