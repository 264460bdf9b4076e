//! Memory and invocation-count profiles. Both count things rather than
//! timing them, so the numbers are hardware independent.

use crate::baselines::{make_probe, MemoryPolicyKind};
use crate::belief::BeliefDims;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::perception::EncoderDims;
use crate::policy::{receding_horizon_execute, PolicyStack};
use crate::seed::{self, Stream};
use crate::simenv::{expert_action, reset, step, Observation, TaskSpec, ACTION_DIM};

pub const CONTEXT_LENGTHS: [usize; 4] = [1, 2, 4, 8];

/// Latency reduction reported for the full system against a stateless
/// per-step model; printed next to the invocation ratio for orientation.
pub const REFERENCE_LATENCY_RATIO: f64 = 5.0;

/// `n` consecutive expert observations with the action that preceded each.
/// Episodes are chained (fresh scene seeds) until `n` is reached.
pub fn observation_stream(task: &TaskSpec, seed: u64, n: usize) -> Result<Vec<(Observation, [f32; ACTION_DIM])>> {
    let mut out = Vec::with_capacity(n);
    let mut ep = 0u64;
    while out.len() < n {
        let s = seed::derive(seed, Stream::EvalEpisode, ep);
        let mut rng = seed::rng(s, Stream::ExpertNoise, 0);
        let (mut state, obs) = reset(task, s)?;
        out.push((obs, [0.0; ACTION_DIM]));
        while out.len() < n && !state.is_terminal() {
            let a = expert_action(&state, &mut rng);
            let (next, obs, _) = step(&state, a)?;
            out.push((obs, a.to_array()));
            state = next;
        }
        ep += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub kind: MemoryPolicyKind,
    /// Retained floats after each context length.
    pub floats: Vec<usize>,
    /// `floats / floats[0]`.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTable {
    pub lengths: Vec<usize>,
    pub rows: Vec<MemoryRow>,
    /// Belief agent's retained floats after step 1 and after the last step
    /// of a long stream.
    pub belief_long_run: (usize, usize, usize),
}

impl MemoryTable {
    pub fn row(&self, kind: MemoryPolicyKind) -> Option<&MemoryRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

/// Retained-state sizes of every memory policy after 1, 2, 4, 8 frames of
/// the same stream, normalised to the 1-frame entry, plus the belief agent
/// at step 1 vs step `long_steps`.
pub fn profile_memory(
    ps: &ParamStore,
    enc: EncoderDims,
    belief: BeliefDims,
    stream: &[(Observation, [f32; ACTION_DIM])],
    lengths: &[usize],
    long_steps: usize,
) -> Result<MemoryTable> {
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    if lengths.is_empty() || lengths[0] == 0 || stream.len() < max_len.max(long_steps) {
        return Err(Error::Precondition(format!(
            "stream of {} observations cannot cover context lengths {lengths:?} and {long_steps} steps",
            stream.len()
        )));
    }
    let mut rows = Vec::new();
    for kind in MemoryPolicyKind::ALL {
        let mut probe = make_probe(kind, ps, enc, belief)?;
        let mut floats = Vec::with_capacity(lengths.len());
        for (t, (obs, a)) in stream.iter().take(max_len).enumerate() {
            probe.observe(ps, obs, *a)?;
            if lengths.contains(&(t + 1)) {
                floats.push(probe.retained_floats());
            }
        }
        let base = floats[0] as f64;
        let ratios = floats.iter().map(|&f| f as f64 / base).collect();
        rows.push(MemoryRow { kind, floats, ratios });
    }
    let mut probe = make_probe(MemoryPolicyKind::BeliefRecursive, ps, enc, belief)?;
    let mut first = 0;
    for (t, (obs, a)) in stream.iter().take(long_steps).enumerate() {
        probe.observe(ps, obs, *a)?;
        if t == 0 {
            first = probe.retained_floats();
        }
    }
    Ok(MemoryTable {
        lengths: lengths.to_vec(),
        rows,
        belief_long_run: (first, long_steps, probe.retained_floats()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvocationCounts {
    pub steps: usize,
    pub intent_calls: usize,
    pub belief_steps: usize,
    pub denoiser_calls: usize,
    pub chunks: usize,
    /// Intent calls of the per-step counterfactual on the same episode.
    pub counterfactual_steps: usize,
    pub counterfactual_intent_calls: usize,
}

impl InvocationCounts {
    /// Counterfactual intent calls per episodic intent call.
    pub fn ratio(&self) -> f64 {
        self.counterfactual_intent_calls as f64 / self.intent_calls.max(1) as f64
    }
}

/// Count component invocations over one episode, then rerun the episode
/// with the intent re-extracted at every step.
pub fn profile_invocations(stack: &mut PolicyStack, task: &TaskSpec, seed: u64) -> Result<InvocationCounts> {
    let saved = stack.control.per_step_intent;
    stack.control.per_step_intent = false;
    let ep = receding_horizon_execute(stack, task, seed, &mut |_, o| o.clone());
    stack.control.per_step_intent = true;
    let cf = receding_horizon_execute(stack, task, seed, &mut |_, o| o.clone());
    stack.control.per_step_intent = saved;
    let (ep, cf) = (ep?, cf?);
    Ok(InvocationCounts {
        steps: ep.steps,
        intent_calls: ep.intent_calls,
        belief_steps: ep.beliefs.len(),
        denoiser_calls: ep.denoiser_calls,
        chunks: ep.chunks.len(),
        counterfactual_steps: cf.steps,
        counterfactual_intent_calls: cf.intent_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::init_belief;
    use crate::config::RunConfig;
    use crate::perception::init_encoder;
    use crate::simenv::{episode_task, DatasetConfig};
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn memory_table_layout() {
        let cfg = RunConfig {
            d_f: 8,
            d_b: 8,
            d_z: 4,
            ..RunConfig::default()
        };
        let enc = EncoderDims::from_config(&cfg);
        let bd = BeliefDims::from_config(&cfg, true);
        let mut ps = ParamStore::new(DType::F32);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        init_encoder(&mut ps, enc, &mut r).unwrap();
        init_belief(&mut ps, bd, &mut r).unwrap();
        let (task, _) = episode_task(&DatasetConfig::default(), 1, 0).unwrap();
        let stream = observation_stream(&task, 4, 30).unwrap();
        assert_eq!(stream.len(), 30);
        let t = profile_memory(&ps, enc, bd, &stream, &CONTEXT_LENGTHS, 30).unwrap();
        let belief = t.row(MemoryPolicyKind::BeliefRecursive).unwrap();
        assert_eq!(belief.ratios, vec![1.0; 4]);
        let acc = t.row(MemoryPolicyKind::TokenAccumulation).unwrap();
        assert_eq!(acc.ratios, vec![1.0, 2.0, 4.0, 8.0]);
        assert!(acc.floats.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t.row(MemoryPolicyKind::Stateless).unwrap().ratios, vec![1.0; 4]);
        assert_eq!(t.belief_long_run.0, t.belief_long_run.2);
        assert!(profile_memory(&ps, enc, bd, &stream[..4], &CONTEXT_LENGTHS, 4).is_err());
    }
}
