use std::collections::VecDeque;

use candle_core::Tensor;

use crate::belief::{BeliefDims, BeliefTracker, LatentMode, Triple};
use crate::error::{Error, Result};
use crate::intent::{EpisodeIntent, IntentDims};
use crate::nn::{self, ParamStore};
use crate::perception::{encode, proprio_tensor, EncoderDims};
use crate::seed;
use crate::simenv::{reset, step, Action, Observation, TaskSpec, ACTION_DIM};

use super::{fuse_state, sample_chunk, ActionStats, Conditioning, NoiseSchedule, PolicyDims, WarmStart};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub exec_stride: usize,
    pub s_warm: usize,
    pub x0_clip: f64,
    /// Belief updates every `belief_stride` environment steps.
    pub belief_stride: usize,
    pub warm_start: bool,
    /// Counterfactual: re-extract the intent from every observation.
    pub per_step_intent: bool,
}

impl ControlConfig {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        Self {
            exec_stride: cfg.exec_stride,
            s_warm: cfg.s_warm,
            x0_clip: cfg.x0_clip,
            belief_stride: cfg.belief_stride.max(1),
            warm_start: true,
            per_step_intent: false,
        }
    }
}

/// Everything needed to act: parameters of all components and their shapes.
pub struct PolicyStack {
    pub ps: ParamStore,
    pub enc: EncoderDims,
    /// Present when the policy is conditioned on the belief.
    pub belief: Option<BeliefDims>,
    pub intent: IntentDims,
    pub policy: PolicyDims,
    pub sched: NoiseSchedule,
    pub stats: ActionStats,
    pub control: ControlConfig,
}

impl PolicyStack {
    pub fn validate(&self) -> Result<()> {
        if self.belief.is_some() != self.policy.use_belief {
            return Err(Error::Config("belief component and policy wiring disagree".into()));
        }
        let c = self.control;
        if c.exec_stride == 0 || c.exec_stride > self.policy.horizon {
            return Err(Error::Config(format!(
                "exec_stride {} outside 1..={}",
                c.exec_stride, self.policy.horizon
            )));
        }
        Ok(())
    }
}

/// Per-episode trace of a closed-loop rollout.
#[derive(Debug, Clone, Default)]
pub struct RolloutLog {
    pub success: bool,
    pub failed: bool,
    pub steps: usize,
    pub actions: Vec<[f32; ACTION_DIM]>,
    /// Belief after each update, `[T, D_b]` (empty without belief).
    pub beliefs: Vec<Vec<f32>>,
    /// Denormalised sampled chunks, each `H × A` flattened.
    pub chunks: Vec<Vec<f32>>,
    pub intent: Vec<f32>,
    pub intent_calls: usize,
    pub policy_steps: usize,
    pub denoiser_calls: usize,
    /// `(t, object index)` each time an object is picked up.
    pub grasps: Vec<(usize, usize)>,
    /// Largest number of floats carried between steps by the belief.
    pub retained_floats: usize,
}

/// Closed-loop controller for one episode.
pub struct EpisodeRunner<'a> {
    stack: &'a PolicyStack,
    tracker: Option<BeliefTracker>,
    intent: EpisodeIntent,
    intent_t: Tensor,
    instruction: Vec<i32>,
    buffer: VecDeque<[f32; ACTION_DIM]>,
    prev_chunk: Option<Tensor>,
    prev_action: [f32; ACTION_DIM],
    t: usize,
    seed: u64,
    pub log: RolloutLog,
}

impl<'a> EpisodeRunner<'a> {
    pub fn new(stack: &'a PolicyStack, instruction: &[i32], obs0: &Observation, seed: u64) -> Result<Self> {
        stack.validate()?;
        let mut intent = EpisodeIntent::new();
        let i = intent.extract(&stack.ps, stack.intent, instruction, obs0, false)?.to_vec();
        let intent_t = nn::matrix(&i, 1, i.len(), stack.ps.dtype())?;
        let tracker = match stack.belief {
            Some(d) => Some(BeliefTracker::new(&stack.ps, d, LatentMode::Posterior)?),
            None => None,
        };
        let log = RolloutLog {
            intent: i,
            intent_calls: intent.invocations(),
            ..Default::default()
        };
        Ok(Self {
            stack,
            tracker,
            intent,
            intent_t,
            instruction: instruction.to_vec(),
            buffer: VecDeque::new(),
            prev_chunk: None,
            prev_action: [0.0; ACTION_DIM],
            t: 0,
            seed,
            log,
        })
    }

    pub fn intent(&self) -> &EpisodeIntent {
        &self.intent
    }

    pub fn belief(&self) -> Option<&[f32]> {
        self.tracker.as_ref().map(|t| t.belief())
    }

    pub fn tracker(&self) -> Option<&BeliefTracker> {
        self.tracker.as_ref()
    }

    /// Next action for observation `obs_t`.
    pub fn act(&mut self, obs: &Observation) -> Result<Action> {
        let st = self.stack;
        let dt = st.ps.dtype();
        let (f, _) = encode(&st.ps, st.enc, &[&obs.image], &[obs.proprio])?;
        let f = f.detach();
        if st.control.per_step_intent && self.t > 0 {
            let i = self.intent.extract(&st.ps, st.intent, &self.instruction, obs, true)?;
            self.intent_t = nn::matrix(i, 1, i.len(), dt)?;
        }
        if let Some(tr) = self.tracker.as_mut() {
            if self.t % st.control.belief_stride == 0 {
                let triple = Triple {
                    f: nn::to_vec1(&f)?,
                    prev_action: self.prev_action,
                    proprio: obs.proprio,
                };
                tr.step(&st.ps, triple)?;
                self.log.beliefs.push(tr.belief().to_vec());
                self.log.retained_floats = self.log.retained_floats.max(tr.retained_floats());
            }
        }
        if self.buffer.is_empty() {
            let state = fuse_state(&st.ps, &f, &proprio_tensor(&[obs.proprio], dt)?)?.detach();
            let belief = match &self.tracker {
                Some(tr) => Some(nn::matrix(tr.belief(), 1, tr.belief().len(), dt)?),
                None => None,
            };
            let cond = Conditioning {
                belief,
                intent: self.intent_t.clone(),
                state,
            };
            let warm = match (&self.prev_chunk, st.control.warm_start) {
                (Some(prev), true) => Some(WarmStart {
                    prev,
                    stride: st.control.exec_stride,
                    s_warm: st.control.s_warm,
                }),
                _ => None,
            };
            let chunk_seed = seed::derive(self.seed, seed::Stream::Sampler, self.log.chunks.len() as u64);
            let (chunk, calls) =
                sample_chunk(&st.ps, st.policy, &st.sched, &cond, warm, st.control.x0_clip, chunk_seed)?;
            self.log.denoiser_calls += calls;
            let rows = nn::to_vec1(&chunk)?;
            let denorm: Vec<[f32; ACTION_DIM]> = rows.chunks(ACTION_DIM).map(|r| st.stats.denormalize(r)).collect();
            self.log.chunks.push(denorm.iter().flatten().copied().collect());
            self.buffer.extend(denorm.iter().take(st.control.exec_stride));
            self.prev_chunk = Some(chunk);
        }
        let a = self.buffer.pop_front().expect("buffer refilled above");
        let action = Action::from_slice(&a).clipped();
        self.prev_action = action.to_array();
        self.log.actions.push(self.prev_action);
        self.log.policy_steps += 1;
        self.t += 1;
        Ok(action)
    }
}

/// Run one episode: update the belief, sample a chunk whenever the executed
/// part of the previous one is used up (warm-started after the first),
/// execute `exec_stride` actions, repeat until the episode ends.
/// `observe` may alter what the agent sees (frame drops, noise).
pub fn receding_horizon_execute(
    stack: &PolicyStack,
    task: &TaskSpec,
    seed: u64,
    observe: &mut dyn FnMut(usize, &Observation) -> Observation,
) -> Result<RolloutLog> {
    let (mut state, obs0) = reset(task, seed)?;
    let seen0 = observe(0, &obs0);
    let mut runner = EpisodeRunner::new(stack, &task.instruction(), &seen0, seed)?;
    let mut seen = seen0;
    while !state.is_terminal() {
        let a = runner.act(&seen)?;
        let held_before = state.held_object;
        let (next, obs, _) = step(&state, a)?;
        if next.held_object.is_some() && next.held_object != held_before {
            runner.log.grasps.push((next.step_count, next.held_object.unwrap()));
        }
        state = next;
        seen = observe(state.step_count, &obs);
    }
    let mut log = runner.log;
    log.success = state.success();
    log.failed = state.failed;
    log.steps = state.step_count;
    log.intent_calls = runner.intent.invocations();
    Ok(log)
}
