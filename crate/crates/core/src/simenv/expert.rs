//! Privileged scripted demonstrator.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{dist, step, Action, Observation, WorldState, DELTA_MAX};
use crate::error::Result;

pub const EXPERT_NOISE_STD: f64 = 0.005;
const GAIN: f64 = 0.7;
/// Close the gripper once this close to the object (grasp radius is 0.03).
const GRASP_TOL: f64 = 0.012;
/// Open the gripper once this close to the goal (goal radius is 0.05).
const RELEASE_TOL: f64 = 0.02;

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let mut v = [GAIN * (to[0] - from[0]), GAIN * (to[1] - from[1])];
    let n = v[0].hypot(v[1]);
    if n > DELTA_MAX {
        v = [v[0] * DELTA_MAX / n, v[1] * DELTA_MAX / n];
    }
    v
}

/// Proportional controller toward the next target (or the goal while
/// holding) with grasp/release at fixed thresholds, plus Gaussian noise of
/// std [`EXPERT_NOISE_STD`] on the motion command. Reads the full world state.
pub fn expert_action<R: Rng>(state: &WorldState, rng: &mut R) -> Action {
    let pos = state.gripper_pos;
    let (mut delta, grip) = match state.held_object {
        Some(_) => {
            let goal = state.task.goal_pos;
            if dist(pos, goal) < RELEASE_TOL {
                ([0.0, 0.0], 0.0)
            } else {
                (toward(pos, goal), 1.0)
            }
        }
        None => match state.next_target() {
            Some(t) => {
                let p = state.objects[t].pos;
                if dist(pos, p) < GRASP_TOL {
                    ([0.0, 0.0], 1.0)
                } else {
                    (toward(pos, p), 0.0)
                }
            }
            None => ([0.0, 0.0], 0.0),
        },
    };
    let noise = Normal::new(0.0, EXPERT_NOISE_STD).expect("valid std");
    delta[0] += noise.sample(rng);
    delta[1] += noise.sample(rng);
    let n = delta[0].hypot(delta[1]);
    if n > DELTA_MAX {
        delta = [delta[0] * DELTA_MAX / n, delta[1] * DELTA_MAX / n];
    }
    Action::new(delta[0], delta[1], grip)
}

/// One full expert episode from `state`. Returns the visited states
/// (before each action), their observations and the actions taken.
pub fn rollout_expert<R: Rng>(
    mut state: WorldState,
    mut obs: Observation,
    rng: &mut R,
) -> Result<(Vec<WorldState>, Vec<Observation>, Vec<Action>, WorldState)> {
    let mut states = Vec::new();
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    while !state.is_terminal() {
        let a = expert_action(&state, rng);
        let (next, next_obs, _) = step(&state, a)?;
        states.push(std::mem::replace(&mut state, next));
        observations.push(std::mem::replace(&mut obs, next_obs));
        actions.push(a.clipped());
    }
    Ok((states, observations, actions, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{reset, TaskKind, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(kind: TaskKind, aliased: bool, seed: u64) -> (WorldState, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = TaskSpec::generate(kind, aliased, 0, 200, 12, &mut rng).unwrap();
        reset(&t, seed).unwrap()
    }

    #[test]
    fn moves_toward_target_within_bounds() {
        let (mut s, _) = fresh(TaskKind::Pp1, false, 3);
        s.gripper_pos = [0.1, 0.1];
        s.objects[0].pos = [0.8, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = expert_action(&s, &mut rng);
            assert!(a.delta[0].hypot(a.delta[1]) <= DELTA_MAX + 1e-12);
            assert!(a.delta[0] > 0.0 && a.delta[1] > 0.0);
            assert!(a.grip_cmd <= 0.5);
        }
    }

    #[test]
    fn closes_gripper_near_target() {
        let (mut s, _) = fresh(TaskKind::Pp1, false, 3);
        s.gripper_pos = s.objects[0].pos;
        s.gripper_pos[0] += 0.005;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(expert_action(&s, &mut rng).grip_cmd > 0.5);
    }

    /// Oracle for the demonstration data: the scripted expert itself.
    #[test]
    fn expert_solves_single_pick_place() {
        let mut ok = 0;
        for seed in 0..100 {
            let (s, o) = fresh(TaskKind::Pp1, false, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (_, _, _, last) = rollout_expert(s, o, &mut rng).unwrap();
            ok += usize::from(last.success());
        }
        assert!(ok >= 98, "expert success {ok}/100");
    }

    #[test]
    fn expert_solves_every_family() {
        for kind in TaskKind::ALL {
            for aliased in [false, true] {
                let mut ok = 0;
                for seed in 0..40 {
                    let (s, o) = fresh(kind, aliased, seed);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    ok += usize::from(rollout_expert(s, o, &mut rng).unwrap().3.success());
                }
                assert!(ok >= 38, "{kind} aliased={aliased}: {ok}/40");
            }
        }
    }
}
