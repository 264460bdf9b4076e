//! Ablation grid and memory-scaling comparison policies.

use std::collections::VecDeque;
use std::fmt;

use crate::belief::{BeliefDims, BeliefTracker, LatentMode, Triple};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::intent::IntentDims;
use crate::nn::{self, ParamStore};
use crate::perception::{encode, tokenize, EncoderDims};
use crate::policy::{ActionStats, ControlConfig, NoiseSchedule, PolicyDims, PolicyStack};
use crate::simenv::{Observation, ACTION_DIM};

/// Which components are active: frame-encoder targets, stochastic latent,
/// belief conditioning of the policy. Written as three letters `t`/`f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationConfig {
    pub use_frame_targets: bool,
    pub use_stochastic_z: bool,
    pub use_belief_conditioning: bool,
}

impl AblationConfig {
    pub const FULL: Self = Self {
        use_frame_targets: true,
        use_stochastic_z: true,
        use_belief_conditioning: true,
    };

    /// The four rows of the ablation table, weakest first.
    pub const GRID: [Self; 4] = [
        Self::new(false, false, false),
        Self::new(false, false, true),
        Self::new(false, true, true),
        Self::FULL,
    ];

    pub const fn new(frame_targets: bool, stochastic_z: bool, belief_conditioning: bool) -> Self {
        Self {
            use_frame_targets: frame_targets,
            use_stochastic_z: stochastic_z,
            use_belief_conditioning: belief_conditioning,
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        let flag = |c: char| match c {
            't' | 'T' => Ok(true),
            'f' | 'F' => Ok(false),
            _ => Err(Error::Config(format!("ablation {code:?}: expected three of t/f"))),
        };
        let cs: Vec<char> = code.trim().chars().collect();
        if cs.len() != 3 {
            return Err(Error::Config(format!("ablation {code:?}: expected three of t/f")));
        }
        Ok(Self::new(flag(cs[0])?, flag(cs[1])?, flag(cs[2])?))
    }

    pub fn code(&self) -> String {
        [self.use_frame_targets, self.use_stochastic_z, self.use_belief_conditioning]
            .iter()
            .map(|&b| if b { 't' } else { 'f' })
            .collect()
    }

    /// Whether a belief model has to be trained at all.
    pub fn needs_belief(&self) -> bool {
        self.use_belief_conditioning
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

/// Assemble an executable policy for `ablation` from a parameter store
/// trained under `trained_as`.
pub fn build_variant(
    ablation: AblationConfig,
    trained_as: AblationConfig,
    ps: ParamStore,
    cfg: &RunConfig,
    stats: ActionStats,
) -> Result<PolicyStack> {
    if ablation != trained_as {
        return Err(Error::Config(format!(
            "checkpoint trained as {trained_as} cannot run as {ablation}"
        )));
    }
    let belief = ablation
        .use_belief_conditioning
        .then(|| BeliefDims::from_config(cfg, ablation.use_stochastic_z));
    if belief.is_some() && !ps.contains("bel.b0") {
        return Err(Error::Dependency("belief parameters missing from checkpoint".into()));
    }
    let stack = PolicyStack {
        ps,
        enc: EncoderDims::from_config(cfg),
        belief,
        intent: IntentDims::from_config(cfg),
        policy: PolicyDims::from_config(cfg, ablation.use_belief_conditioning),
        sched: NoiseSchedule::from_config(cfg)?,
        stats,
        control: ControlConfig::from_config(cfg),
    };
    stack.validate()?;
    Ok(stack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemoryPolicyKind {
    BeliefRecursive,
    TokenAccumulation,
    FixedWindow,
    Stateless,
}

impl MemoryPolicyKind {
    pub const ALL: [Self; 4] = [
        Self::BeliefRecursive,
        Self::TokenAccumulation,
        Self::FixedWindow,
        Self::Stateless,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::BeliefRecursive => "belief_recursive",
            Self::TokenAccumulation => "token_accumulation",
            Self::FixedWindow => "fixed_window",
            Self::Stateless => "stateless",
        }
    }
}

/// Context carried between steps by one kind of policy.
pub trait MemoryProbe {
    fn observe(&mut self, ps: &ParamStore, obs: &Observation, prev_action: [f32; ACTION_DIM]) -> Result<()>;
    /// Floats retained after the latest observation.
    fn retained_floats(&self) -> usize;
    /// Frames that currently influence the next action.
    fn context_frames(&self) -> usize;
}

/// Belief vector plus the last `K` raw triples, updated recursively.
pub struct BeliefRecursiveProbe {
    enc: EncoderDims,
    tracker: BeliefTracker,
}

impl BeliefRecursiveProbe {
    pub fn new(ps: &ParamStore, enc: EncoderDims, dims: BeliefDims) -> Result<Self> {
        Ok(Self {
            enc,
            tracker: BeliefTracker::new(ps, dims, LatentMode::Posterior)?,
        })
    }
}

impl MemoryProbe for BeliefRecursiveProbe {
    fn observe(&mut self, ps: &ParamStore, obs: &Observation, prev_action: [f32; ACTION_DIM]) -> Result<()> {
        let (f, _) = encode(ps, self.enc, &[&obs.image], &[obs.proprio])?;
        self.tracker.step(
            ps,
            Triple {
                f: nn::to_vec1(&f)?,
                prev_action,
                proprio: obs.proprio,
            },
        )?;
        Ok(())
    }

    fn retained_floats(&self) -> usize {
        self.tracker.dims.retained_floats()
    }

    fn context_frames(&self) -> usize {
        self.tracker.window_len()
    }
}

/// Keeps every frame's tokens, like a sequence model reading the whole history.
/// `window = None` accumulates without bound; `Some(k)` keeps the last `k`.
pub struct TokenProbe {
    enc: EncoderDims,
    window: Option<usize>,
    frames: VecDeque<Vec<f32>>,
}

impl TokenProbe {
    pub fn accumulating(enc: EncoderDims) -> Self {
        Self {
            enc,
            window: None,
            frames: VecDeque::new(),
        }
    }

    pub fn windowed(enc: EncoderDims, k: usize) -> Self {
        Self {
            enc,
            window: Some(k.max(1)),
            frames: VecDeque::new(),
        }
    }

    pub fn stateless(enc: EncoderDims) -> Self {
        Self::windowed(enc, 1)
    }
}

impl MemoryProbe for TokenProbe {
    fn observe(&mut self, ps: &ParamStore, obs: &Observation, _prev: [f32; ACTION_DIM]) -> Result<()> {
        let toks = tokenize(ps, self.enc, &[&obs.image], &[obs.proprio])?;
        self.frames.push_back(nn::to_vec1(&toks)?);
        if let Some(k) = self.window {
            while self.frames.len() > k {
                self.frames.pop_front();
            }
        }
        Ok(())
    }

    fn retained_floats(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    fn context_frames(&self) -> usize {
        self.frames.len()
    }
}

pub fn make_probe(
    kind: MemoryPolicyKind,
    ps: &ParamStore,
    enc: EncoderDims,
    belief: BeliefDims,
) -> Result<Box<dyn MemoryProbe>> {
    Ok(match kind {
        MemoryPolicyKind::BeliefRecursive => Box::new(BeliefRecursiveProbe::new(ps, enc, belief)?),
        MemoryPolicyKind::TokenAccumulation => Box::new(TokenProbe::accumulating(enc)),
        MemoryPolicyKind::FixedWindow => Box::new(TokenProbe::windowed(enc, belief.k)),
        MemoryPolicyKind::Stateless => Box::new(TokenProbe::stateless(enc)),
    })
}

/// Retained floats after each observation of a stream under the
/// all-past-tokens policy.
pub fn token_accumulation_baseline(
    ps: &ParamStore,
    enc: EncoderDims,
    stream: &[(Observation, [f32; ACTION_DIM])],
) -> Result<Vec<usize>> {
    let mut probe = TokenProbe::accumulating(enc);
    stream
        .iter()
        .map(|(o, a)| {
            probe.observe(ps, o, *a)?;
            Ok(probe.retained_floats())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::init_belief;
    use crate::perception::init_encoder;
    use crate::simenv::{IMG_LEN, PROPRIO_DIM};
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_and_print_codes() {
        for code in ["fff", "fft", "ftt", "ttt"] {
            assert_eq!(AblationConfig::parse(code).unwrap().code(), code);
        }
        assert_eq!(AblationConfig::parse("TTT").unwrap(), AblationConfig::FULL);
        for bad in ["tt", "ttx", "tttt", ""] {
            assert!(AblationConfig::parse(bad).is_err());
        }
        let codes: Vec<String> = AblationConfig::GRID.iter().map(|a| a.code()).collect();
        assert_eq!(codes, ["fff", "fft", "ftt", "ttt"]);
    }

    fn setup() -> (ParamStore, EncoderDims, BeliefDims) {
        let cfg = RunConfig {
            d_f: 8,
            d_b: 8,
            d_z: 4,
            ..RunConfig::default()
        };
        let enc = EncoderDims::from_config(&cfg);
        let bd = BeliefDims::from_config(&cfg, true);
        let mut ps = ParamStore::new(DType::F32);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        init_encoder(&mut ps, enc, &mut r).unwrap();
        init_belief(&mut ps, bd, &mut r).unwrap();
        (ps, enc, bd)
    }

    fn obs(i: usize) -> Observation {
        Observation {
            image: (0..IMG_LEN).map(|j| ((i * 7 + j) % 251) as u8).collect(),
            proprio: [0.5; PROPRIO_DIM],
        }
    }

    #[test]
    fn memory_ratios_by_history_length() {
        let (ps, enc, bd) = setup();
        let history = |kind: MemoryPolicyKind, n: usize| {
            let mut p = make_probe(kind, &ps, enc, bd).unwrap();
            for i in 0..n {
                p.observe(&ps, &obs(i), [0.0; 3]).unwrap();
            }
            p.retained_floats()
        };
        let base = history(MemoryPolicyKind::BeliefRecursive, 1);
        for n in [1, 2, 4, 8] {
            assert_eq!(history(MemoryPolicyKind::BeliefRecursive, n) as f64 / base as f64, 1.0);
        }
        let one = history(MemoryPolicyKind::TokenAccumulation, 1);
        assert_eq!(one, enc.n_tokens() * enc.d_f);
        assert_eq!(history(MemoryPolicyKind::TokenAccumulation, 8) as f64 / one as f64, 8.0);
        let mut s = make_probe(MemoryPolicyKind::Stateless, &ps, enc, bd).unwrap();
        for i in 0..10 {
            s.observe(&ps, &obs(i), [0.0; 3]).unwrap();
            assert_eq!(s.context_frames(), 1);
        }
        assert_eq!(
            history(MemoryPolicyKind::FixedWindow, 20),
            bd.k * enc.n_tokens() * enc.d_f
        );
        let stream: Vec<_> = (0..5).map(|i| (obs(i), [0.0f32; 3])).collect();
        let trace = token_accumulation_baseline(&ps, enc, &stream).unwrap();
        assert_eq!(trace, (1..=5).map(|t| t * one).collect::<Vec<_>>());
    }

    #[test]
    fn variant_wiring() {
        let cfg = RunConfig::default();
        let mut ps = ParamStore::new(DType::F32);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        init_belief(&mut ps, BeliefDims::from_config(&cfg, true), &mut r).unwrap();
        let full = build_variant(AblationConfig::FULL, AblationConfig::FULL, ps, &cfg, ActionStats::identity()).unwrap();
        assert!(full.belief.unwrap().stochastic && full.policy.use_belief);
        let none = AblationConfig::parse("fff").unwrap();
        let plain = build_variant(none, none, ParamStore::new(DType::F32), &cfg, ActionStats::identity()).unwrap();
        assert!(plain.belief.is_none() && !plain.policy.use_belief);
        assert!(build_variant(none, AblationConfig::FULL, ParamStore::new(DType::F32), &cfg, ActionStats::identity()).is_err());
        let ftt = AblationConfig::parse("ftt").unwrap();
        assert!(matches!(
            build_variant(ftt, ftt, ParamStore::new(DType::F32), &cfg, ActionStats::identity()),
            Err(Error::Dependency(_))
        ));
    }
}
