//! Run-level entry points: each reads the run configuration, does one job
//! and writes its report under `<run_dir>/reports`.

use std::path::PathBuf;

use candle_core::DType;
use rand::Rng;

use super::analysis::{
    analyze_belief_similarity, analyze_stochasticity, dump_attention, inverse_dynamics_r2, mean_action_features,
    occlusion_events, AttentionDump, EpisodeTrace, SimilarityReport, StochasticReport,
};
use super::bench::{observation_stream, profile_invocations, profile_memory, InvocationCounts, MemoryTable, CONTEXT_LENGTHS};
use super::checkpoint::{Checkpoint, Stage};
use super::data::{belief_traces, dataset_config, encode_episodes, load_run_dataset, split};
use super::eval::{eval_episode, eval_master, evaluate_expert, evaluate_success, make_report, EvalReport, Perturbation};
use super::report::{self, Report};
use super::train::{checkpoint_path, load_policy_stack};
use crate::baselines::{build_variant, AblationConfig};
use crate::belief::{init_belief, BeliefDims};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::intent::{init_intent, IntentDims};
use crate::nn::ParamStore;
use crate::perception::{init_encoder, EncoderDims};
use crate::policy::{init_policy, ActionStats, PolicyDims, PolicyStack, RolloutLog};
use crate::seed::{self, Stream};
use crate::simenv::{generate_dataset, DatasetManifest, EpisodeRecord, Instruction, Observation};

const DTYPE: DType = DType::F32;
/// Steps of the long stream in the memory profile.
pub const LONG_RUN_STEPS: usize = 1000;

pub fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_path("reports")
}

fn finish(cfg: &RunConfig, rep: &Report, stem: &str) -> Result<Vec<PathBuf>> {
    rep.write(&reports_dir(cfg), stem)
}

/// Generate the run's dataset at `cfg.data_path()`.
pub fn gen_data(cfg: &RunConfig) -> Result<(DatasetManifest, PathBuf)> {
    cfg.validate()?;
    let path = cfg.data_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let m = generate_dataset(&dataset_config(cfg)?, cfg.episodes, cfg.seed, &path)?;
    Ok((m, path))
}

fn checkpoint_hashes(ck: &Checkpoint) -> Vec<String> {
    let mut v = vec![format!("{}:{}", ck.stage, ck.config_hash)];
    v.extend(ck.parents.iter().map(|(k, d)| format!("{k}-file:{d}")));
    v
}

/// Success rate of `variant` (an ablation code or `expert`) on the
/// configured task.
pub fn run_eval(cfg: &RunConfig, variant: &str) -> Result<(EvalReport, Vec<PathBuf>)> {
    cfg.validate()?;
    let dcfg = dataset_config(cfg)?;
    let master = eval_master(cfg.seed);
    let (outcomes, hashes, perturbation) = if variant == "expert" {
        (evaluate_expert(&dcfg, cfg.eval_episodes, master, cfg.workers)?, Vec::new(), Perturbation::NONE)
    } else {
        let ab = AblationConfig::parse(variant)?;
        let mut c = cfg.clone();
        c.ablation = ab.code();
        let (stack, ck) = load_policy_stack(&c)?;
        let p = Perturbation::from_config(cfg);
        let (o, _) = evaluate_success(&stack, &dcfg, cfg.eval_episodes, master, p, cfg.workers)?;
        (o, checkpoint_hashes(&ck), p)
    };
    let r = make_report(cfg, variant, outcomes, master, perturbation, hashes);
    let files = finish(cfg, &report::eval_report(&r), &format!("eval-{}-{variant}", cfg.task))?;
    Ok((r, files))
}

/// Trained belief and the held-out features every analysis needs.
pub struct BeliefAnalysis {
    pub ck: Checkpoint,
    pub ps: ParamStore,
    pub dims: BeliefDims,
    pub train: Vec<EpisodeRecord>,
    pub held_out: Vec<EpisodeRecord>,
    pub summaries: Vec<Vec<f32>>,
    pub beliefs: Vec<Vec<Vec<f32>>>,
}

impl BeliefAnalysis {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ab = AblationConfig::parse(&cfg.ablation)?;
        if !ab.needs_belief() {
            return Err(Error::Usage(format!("variant {ab} has no belief to analyse")));
        }
        let dims = BeliefDims::from_config(cfg, ab.use_stochastic_z);
        let ck = Checkpoint::load_expect(&checkpoint_path(cfg, Stage::Belief)?, Stage::Belief, &cfg.model_hash())?;
        let mut ps = ck.store(DTYPE)?;
        ps.freeze_all();
        let (_, episodes) = load_run_dataset(cfg)?;
        let data = split(episodes);
        let held_out: Vec<EpisodeRecord> = data.held_out.into_iter().filter(|e| !e.is_empty()).collect();
        let summaries = encode_episodes(&ps, EncoderDims::from_config(cfg), &held_out)?;
        let beliefs = belief_traces(&ps, dims, &summaries, &held_out)?;
        Ok(Self {
            ck,
            ps,
            dims,
            train: data.train,
            held_out,
            summaries,
            beliefs,
        })
    }

    pub fn traces(&self, d_f: usize) -> Vec<EpisodeTrace> {
        self.held_out
            .iter()
            .zip(&self.summaries)
            .zip(&self.beliefs)
            .map(|((e, s), b)| EpisodeTrace::new(b.clone(), s, d_f, e.actions.clone()))
            .collect()
    }
}

/// Similarity structure of held-out beliefs, plus inverse-dynamics `R²`.
pub fn run_similarity(cfg: &RunConfig, ba: &BeliefAnalysis) -> Result<(SimilarityReport, f64, Vec<PathBuf>)> {
    let traces = ba.traces(cfg.d_f);
    let sim = analyze_belief_similarity(&traces, cfg.analysis_pairs, cfg.chunk, cfg.seed)?;
    let r2 = inverse_dynamics_r2(&ba.ps, &traces, &mean_action_features(&ba.train))?;
    let mut rep = report::similarity_report(&sim);
    rep.kv("inverse_dynamics_r2", report::num(r2))
        .kv("checkpoint_hashes", checkpoint_hashes(&ba.ck).join(","))
        .kv("config_hash", cfg.hash());
    let mut files = finish(cfg, &rep, "similarity")?;
    let dir = reports_dir(cfg);
    let pa: Vec<(f64, f64)> = sim.pairs.iter().map(|p| (p.belief_sim, -p.action_dist)).collect();
    let po: Vec<(f64, f64)> = sim.pairs.iter().map(|p| (p.belief_sim, p.obs_sim)).collect();
    for (name, title, pts) in [
        ("similarity-action.svg", "belief similarity vs negated action distance", pa),
        ("similarity-obs.svg", "belief similarity vs future frame similarity", po),
    ] {
        let path = dir.join(name);
        report::plot_scatter(&path, title, &pts)?;
        files.push(path);
    }
    Ok((sim, r2, files))
}

/// Prior samples at a mid-episode belief of the first held-out episode.
pub fn run_stochastic(cfg: &RunConfig, ba: &BeliefAnalysis) -> Result<(StochasticReport, Vec<PathBuf>)> {
    let ep = ba
        .beliefs
        .first()
        .ok_or_else(|| Error::Precondition("no held-out episodes".into()))?;
    let b = &ep[ep.len() / 2];
    let kl = ba.ck.curve("kl").unwrap_or_default();
    let s = analyze_stochasticity(&ba.ps, ba.dims, b, cfg.stochastic_samples, cfg.seed, &kl)?;
    let mut rep = report::stochastic_report(&s);
    rep.kv("checkpoint_hashes", checkpoint_hashes(&ba.ck).join(","))
        .kv("config_hash", cfg.hash());
    let mut files = finish(cfg, &rep, "stochastic")?;
    let dir = reports_dir(cfg);
    let curve: Vec<(f64, f64)> = kl.iter().enumerate().map(|(i, &v)| (i as f64, f64::from(v))).collect();
    let p = dir.join("kl-curve.svg");
    report::plot_lines(&p, "per-step KL during belief training (nats)", &[("kl", curve)])?;
    files.push(p);
    let fan: Vec<(&str, Vec<(f64, f64)>)> = s
        .fan
        .iter()
        .map(|f| ("", vec![(f[0], f[1]), (f[2], f[3])]))
        .collect();
    let p = dir.join("divergence-fan.svg");
    report::plot_lines(&p, "decoded prior samples, 1 to 5 steps ahead", &fan)?;
    files.push(p);
    let p = dir.join("divergence-h5.svg");
    report::plot_heatmap(&p, "pairwise cosine distance, 5 steps ahead", &s.divergence_h5)?;
    files.push(p);
    Ok((s, files))
}

/// Attention of the first held-out episode that contains an occlusion.
pub fn run_attention(cfg: &RunConfig, ba: &BeliefAnalysis) -> Result<(AttentionDump, Vec<PathBuf>)> {
    let i = ba
        .held_out
        .iter()
        .position(|e| !occlusion_events(e).is_empty())
        .ok_or_else(|| Error::Precondition("no held-out episode contains an occlusion event".into()))?;
    let a = dump_attention(&ba.ps, ba.dims, &ba.summaries[i], &ba.held_out[i], &[], cfg.k_window)?;
    let mut rep = report::attention_report(&a);
    rep.kv("episode_seed", ba.held_out[i].seed)
        .kv("checkpoint_hashes", checkpoint_hashes(&ba.ck).join(","))
        .kv("config_hash", cfg.hash());
    let mut files = finish(cfg, &rep, "attention")?;
    let m: Vec<Vec<f64>> = a.rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let p = reports_dir(cfg).join("attention.svg");
    report::plot_heatmap(&p, "window attention (rows: steps, col 0: belief token)", &m)?;
    files.push(p);
    Ok((a, files))
}

/// Freshly initialised encoder and belief.
fn fresh_params(cfg: &RunConfig, ab: AblationConfig) -> Result<ParamStore> {
    let mut ps = ParamStore::new(DTYPE);
    init_encoder(&mut ps, EncoderDims::from_config(cfg), &mut seed::rng(cfg.seed, Stream::ParamInit, 0))?;
    init_belief(
        &mut ps,
        BeliefDims::from_config(cfg, ab.use_stochastic_z),
        &mut seed::rng(cfg.seed, Stream::ParamInit, 1),
    )?;
    Ok(ps)
}

/// Trained belief parameters when the checkpoint exists, fresh ones
/// otherwise. Retained-state sizes depend only on the architecture.
fn profiling_params(cfg: &RunConfig, ab: AblationConfig) -> Result<ParamStore> {
    let path = checkpoint_path(cfg, Stage::Belief)?;
    let mut ps = if path.exists() {
        Checkpoint::load_expect(&path, Stage::Belief, &cfg.model_hash())?.store(DTYPE)?
    } else {
        fresh_params(cfg, ab)?
    };
    ps.freeze_all();
    Ok(ps)
}

pub fn run_memory_bench(cfg: &RunConfig) -> Result<(MemoryTable, Vec<PathBuf>)> {
    cfg.validate()?;
    let ab = AblationConfig::parse(&cfg.ablation)?;
    let ps = profiling_params(cfg, ab)?;
    let (task, s) = eval_episode(&dataset_config(cfg)?, eval_master(cfg.seed), 0)?;
    let stream = observation_stream(&task, s, LONG_RUN_STEPS)?;
    let t = profile_memory(
        &ps,
        EncoderDims::from_config(cfg),
        BeliefDims::from_config(cfg, ab.use_stochastic_z),
        &stream,
        &CONTEXT_LENGTHS,
        LONG_RUN_STEPS,
    )?;
    let mut rep = report::memory_report(&t);
    rep.kv("config_hash", cfg.hash());
    let mut files = finish(cfg, &rep, "memory")?;
    let cats: Vec<String> = t.lengths.iter().map(|l| format!("{l} frames")).collect();
    let series: Vec<(&str, Vec<f64>)> = t.rows.iter().map(|r| (r.kind.name(), r.ratios.clone())).collect();
    let p = reports_dir(cfg).join("memory.svg");
    report::plot_bars(&p, "retained state relative to one frame", &cats, &series)?;
    files.push(p);
    Ok((t, files))
}

/// Fresh parameters for the full stack of `cfg.ablation`, with identity
/// action normalisation.
pub fn fresh_stack(cfg: &RunConfig) -> Result<PolicyStack> {
    cfg.validate()?;
    let ab = AblationConfig::parse(&cfg.ablation)?;
    let mut ps = fresh_params(cfg, ab)?;
    if !ab.needs_belief() {
        ps = ps.subset("enc.")?;
    }
    init_intent(&mut ps, IntentDims::from_config(cfg), cfg.backbone_seed, &mut seed::rng(cfg.seed, Stream::ParamInit, 2))?;
    init_policy(
        &mut ps,
        PolicyDims::from_config(cfg, ab.use_belief_conditioning),
        &mut seed::rng(cfg.seed, Stream::ParamInit, 3),
    )?;
    ps.freeze_all();
    build_variant(ab, ab, ps, cfg, ActionStats::identity())
}

/// Invocation counts of the trained policy (or `stack` when given) on the
/// first evaluation episode.
pub fn run_invocation_bench(cfg: &RunConfig, stack: Option<PolicyStack>) -> Result<(InvocationCounts, Vec<PathBuf>)> {
    cfg.validate()?;
    let (mut stack, hashes) = match stack {
        Some(s) => (s, vec!["untrained".to_string()]),
        None => {
            let (s, ck) = load_policy_stack(cfg)?;
            (s, checkpoint_hashes(&ck))
        }
    };
    let (task, s) = eval_episode(&dataset_config(cfg)?, eval_master(cfg.seed), 0)?;
    let c = profile_invocations(&mut stack, &task, s)?;
    let mut rep = report::invocation_report(&c);
    rep.kv("horizon", task.horizon)
        .kv("checkpoint_hashes", hashes.join(","))
        .kv("config_hash", cfg.hash());
    let files = finish(cfg, &rep, "invocations")?;
    Ok((c, files))
}

/// Run the trained policy on a free-form instruction. Returns the log and
/// every clean observation, first frame included.
pub fn rollout_instruction(cfg: &RunConfig, text: &str) -> Result<(RolloutLog, Vec<Observation>)> {
    let ins = Instruction::parse(text)?;
    let mut rng = seed::rng(cfg.seed, Stream::TaskLayout, 1);
    let task = ins.to_task(cfg.aliased, cfg.horizon, cfg.settle_steps, &mut rng)?;
    let scene_seed = rng.random::<u64>();
    let (stack, _) = load_policy_stack(cfg)?;
    let mut frames = Vec::new();
    let log = crate::policy::receding_horizon_execute(&stack, &task, scene_seed, &mut |_, o| {
        frames.push(o.clone());
        o.clone()
    })?;
    Ok((log, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &std::path::Path) -> RunConfig {
        RunConfig {
            run_dir: dir.to_string_lossy().into_owned(),
            d_f: 8,
            d_b: 8,
            d_z: 4,
            d_i: 8,
            d_s: 8,
            d_backbone: 16,
            d_policy: 8,
            chunk: 8,
            exec_stride: 4,
            diffusion_steps: 25,
            s_warm: 3,
            eval_episodes: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn fresh_stack_runs_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { horizon: 40, ..tiny(dir.path()) };
        let stack = fresh_stack(&cfg).unwrap();
        let (c, files) = run_invocation_bench(&cfg, Some(stack)).unwrap();
        assert_eq!(c.intent_calls, 1);
        assert_eq!(c.counterfactual_intent_calls, c.counterfactual_steps);
        assert!(files[0].exists());
        let (t, _) = run_memory_bench(&cfg).unwrap();
        assert_eq!(t.belief_long_run.0, t.belief_long_run.2);
    }

    #[test]
    fn expert_eval_report_is_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let (a, files) = run_eval(&cfg, "expert").unwrap();
        let first = std::fs::read(&files[0]).unwrap();
        let (b, _) = run_eval(&cfg, "expert").unwrap();
        assert_eq!(a, b);
        assert_eq!(first, std::fs::read(&files[0]).unwrap());
        assert!(matches!(run_eval(&cfg, "ttt"), Err(Error::Dependency(_))));
    }
}
