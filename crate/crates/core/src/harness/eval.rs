//! Closed-loop success-rate evaluation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::{receding_horizon_execute, PolicyStack, RolloutLog};
use crate::seed::{self, Stream};
use crate::simenv::{episode_task, reset, rollout_expert, DatasetConfig, Observation, TaskSpec};

/// Observation perturbations applied at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    /// Probability that the agent sees its previous observation again.
    pub frame_drop: f64,
    /// Gaussian noise std on pixels (in `[0, 1]` units) and proprio.
    pub obs_noise: f64,
}

impl Perturbation {
    pub const NONE: Self = Self {
        frame_drop: 0.0,
        obs_noise: 0.0,
    };

    pub fn from_config(cfg: &RunConfig) -> Self {
        if cfg.perturb {
            Self {
                frame_drop: cfg.frame_drop,
                obs_noise: cfg.obs_noise,
            }
        } else {
            Self::NONE
        }
    }

    pub fn is_none(&self) -> bool {
        self.frame_drop <= 0.0 && self.obs_noise <= 0.0
    }
}

/// Stateful observation channel for one episode.
pub struct PerturbedView {
    p: Perturbation,
    rng: rand_chacha::ChaCha8Rng,
    last: Option<Observation>,
    pub dropped: usize,
}

impl PerturbedView {
    pub fn new(p: Perturbation, episode_seed: u64) -> Self {
        Self {
            p,
            rng: seed::rng(episode_seed, Stream::Perturbation, 0),
            last: None,
            dropped: 0,
        }
    }

    pub fn observe(&mut self, t: usize, obs: &Observation) -> Observation {
        if self.p.is_none() {
            return obs.clone();
        }
        if t > 0 && self.last.is_some() && self.rng.random::<f64>() < self.p.frame_drop {
            self.dropped += 1;
            return self.last.clone().expect("checked above");
        }
        let mut seen = obs.clone();
        if self.p.obs_noise > 0.0 {
            let n = Normal::new(0.0, self.p.obs_noise).expect("finite std");
            for px in seen.image.iter_mut() {
                let v = f64::from(*px) + 255.0 * n.sample(&mut self.rng);
                *px = v.round().clamp(0.0, 255.0) as u8;
            }
            for v in seen.proprio.iter_mut() {
                *v += n.sample(&mut self.rng) as f32;
            }
        }
        self.last = Some(seen.clone());
        seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    /// A wrong object was delivered.
    pub failed: bool,
    pub steps: usize,
    /// The hidden look-alike was picked up.
    pub regrasp: bool,
    pub intent_calls: usize,
    pub denoiser_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub variant: String,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub outcomes: Vec<EpisodeOutcome>,
    pub master_seed: u64,
    pub perturbation: Perturbation,
    pub config_hash: String,
    /// Config hashes of every checkpoint used.
    pub checkpoint_hashes: Vec<String>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success).count()
    }

    pub fn regrasp_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.regrasp).count() as f64 / self.outcomes.len() as f64
    }
}

/// Evaluation master seed; disjoint from the dataset's episode stream.
pub fn eval_master(seed: u64) -> u64 {
    seed::derive(seed, Stream::EvalEpisode, 0)
}

/// Task and scene seed of evaluation episode `i`.
pub fn eval_episode(dcfg: &DatasetConfig, master: u64, i: usize) -> Result<(TaskSpec, u64)> {
    episode_task(dcfg, master, i as u64)
}

fn run_indices<T: Send>(
    workers: usize,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn outcome(index: usize, seed: u64, task: &TaskSpec, log: &RolloutLog) -> EpisodeOutcome {
    let hidden = task.twin.map(|(_, h)| h);
    EpisodeOutcome {
        index,
        seed,
        success: log.success,
        failed: log.failed,
        steps: log.steps,
        regrasp: log.grasps.iter().any(|&(_, o)| Some(o) == hidden),
        intent_calls: log.intent_calls,
        denoiser_calls: log.denoiser_calls,
    }
}

/// Roll out `stack` on `n` evaluation episodes. Per-episode seeds derive from
/// `master`, so any episode replays alone; results do not depend on `workers`.
pub fn evaluate_success(
    stack: &PolicyStack,
    dcfg: &DatasetConfig,
    n: usize,
    master: u64,
    perturbation: Perturbation,
    workers: usize,
) -> Result<(Vec<EpisodeOutcome>, Vec<RolloutLog>)> {
    let runs = run_indices(workers, n, |i| {
        let (task, s) = eval_episode(dcfg, master, i)?;
        let mut view = PerturbedView::new(perturbation, s);
        let log = receding_horizon_execute(stack, &task, s, &mut |t, o| view.observe(t, o))?;
        Ok((outcome(i, s, &task, &log), log))
    })?;
    Ok(runs.into_iter().unzip())
}

/// The privileged scripted expert on the same episodes.
pub fn evaluate_expert(dcfg: &DatasetConfig, n: usize, master: u64, workers: usize) -> Result<Vec<EpisodeOutcome>> {
    run_indices(workers, n, |i| {
        let (task, s) = eval_episode(dcfg, master, i)?;
        let (s0, o0) = reset(&task, s)?;
        let mut rng = seed::rng(s, Stream::ExpertNoise, 0);
        let (states, _, _, last) = rollout_expert(s0, o0, &mut rng)?;
        let hidden = task.twin.map(|(_, h)| h);
        Ok(EpisodeOutcome {
            index: i,
            seed: s,
            success: last.success(),
            failed: last.failed,
            steps: last.step_count,
            regrasp: states.iter().any(|st| st.held_object.is_some() && st.held_object == hidden),
            intent_calls: 0,
            denoiser_calls: 0,
        })
    })
}

pub fn success_rate(outcomes: &[EpisodeOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64
}

pub fn make_report(
    cfg: &RunConfig,
    variant: &str,
    outcomes: Vec<EpisodeOutcome>,
    master: u64,
    perturbation: Perturbation,
    checkpoint_hashes: Vec<String>,
) -> EvalReport {
    EvalReport {
        task: cfg.task.clone(),
        variant: variant.to_string(),
        n_episodes: outcomes.len(),
        success_rate: success_rate(&outcomes),
        outcomes,
        master_seed: master,
        perturbation,
        config_hash: cfg.hash(),
        checkpoint_hashes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::TaskKind;

    #[test]
    fn expert_calibration_on_every_family() {
        for task in [TaskKind::Pp1, TaskKind::PpN, TaskKind::Stack1, TaskKind::StackN] {
            let dcfg = DatasetConfig {
                task,
                ..Default::default()
            };
            let out = evaluate_expert(&dcfg, 40, eval_master(11), 1).unwrap();
            let rate = success_rate(&out);
            assert!(rate >= 0.95, "{task}: expert success {rate}");
        }
    }

    #[test]
    fn perturbed_view_is_seeded() {
        let dcfg = DatasetConfig::default();
        let (task, s) = eval_episode(&dcfg, 5, 0).unwrap();
        let (_, o) = reset(&task, s).unwrap();
        let p = Perturbation {
            frame_drop: 0.5,
            obs_noise: 0.02,
        };
        let mut a = PerturbedView::new(p, s);
        let mut b = PerturbedView::new(p, s);
        for t in 0..20 {
            assert_eq!(a.observe(t, &o), b.observe(t, &o));
        }
        assert!(a.dropped > 0);
        let mut clean = PerturbedView::new(Perturbation::NONE, s);
        assert_eq!(clean.observe(3, &o), o);
    }
}
