//! The three training stages. Each stage reads the previous stage's
//! checkpoint, refuses one written under a different architecture, and
//! writes its own checkpoint atomically.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{file_digest, Checkpoint, RngState, Stage};
use super::data::{
    belief_traces, encode_episodes, load_run_dataset, pixel_targets, split, stack_tokens, token_rows,
    EpisodeTokens, Split,
};
use crate::baselines::{build_variant, AblationConfig};
use crate::belief::{
    belief_rollout_train, init_belief, min_episode_len, BeliefDims, KlSchedule, LossWeights, SequenceBatch,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::intent::{init_intent, intent_head, IntentDims};
use crate::nn::{self, ParamStore, Trainer};
use crate::perception::{encode, info_nce_in_batch, init_encoder, sample_pair, EncoderDims, PixelEmbedding};
use crate::policy::{
    chunk_target, diffusion_loss, draw_noise, fuse_state, init_policy, ActionStats, Conditioning,
    NoiseSchedule, PolicyDims, PolicyStack,
};
use crate::perception::proprio_tensor;
use crate::seed::{self, Stream};
use crate::simenv::{augment, AugmentParams, EpisodeRecord, ACTION_DIM};

const DTYPE: DType = DType::F32;

/// Decay from `base` to a tenth of it along a half cosine.
pub fn cosine_lr(base: f64, iter: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (iter as f64 / total as f64).min(1.0);
    base * (0.1 + 0.45 * (1.0 + (PI * p).cos()))
}

pub fn checkpoint_path(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let ab = AblationConfig::parse(&cfg.ablation)?;
    Ok(match stage {
        Stage::Warmstart => cfg.run_path("warmstart.ckpt"),
        Stage::Belief => cfg.run_path(&format!("belief-{ab}.ckpt")),
        Stage::Policy => cfg.run_path(&format!("policy-{ab}.ckpt")),
    })
}

fn log_progress(stage: Stage, iter: usize, total: usize, every: usize, msg: impl FnOnce() -> String) {
    if every > 0 && (iter % every == 0 || iter + 1 == total) {
        tracing::info!(%stage, iter, "{}", msg());
    }
}

/// Run one stage end to end from the run configuration and write its
/// checkpoint. Returns the checkpoint and its path.
pub fn train_stage(cfg: &RunConfig, stage: Stage) -> Result<(Checkpoint, PathBuf)> {
    cfg.validate()?;
    let ablation = AblationConfig::parse(&cfg.ablation)?;
    // check prerequisites before touching the dataset
    let prereq = match stage {
        Stage::Warmstart => None,
        Stage::Belief => Some(Stage::Warmstart),
        Stage::Policy if ablation.needs_belief() => Some(Stage::Belief),
        Stage::Policy => Some(Stage::Warmstart),
    };
    let parent = match prereq {
        Some(st) => {
            let path = checkpoint_path(cfg, st)?;
            let ck = Checkpoint::load_expect(&path, st, &cfg.model_hash()).map_err(|e| match e {
                Error::Dependency(_) => Error::Dependency(format!(
                    "{stage} stage needs the {st} checkpoint {path:?}; train --stage {st} first"
                )),
                other => other,
            })?;
            Some((ck, file_digest(&path)?))
        }
        None => None,
    };
    let (_, episodes) = load_run_dataset(cfg)?;
    let data = split(episodes);
    let mut ck = match (stage, parent) {
        (Stage::Warmstart, _) => train_warmstart(cfg, &data.train)?,
        (Stage::Belief, Some((p, d))) => {
            let mut ck = train_belief(cfg, &p, &data)?;
            ck.parents.insert(p.stage.to_string(), d);
            ck
        }
        (Stage::Policy, Some((p, d))) => {
            let mut ck = train_policy(cfg, &p, &data)?;
            ck.parents.extend(p.parents.clone());
            ck.parents.insert(p.stage.to_string(), d);
            ck
        }
        _ => unreachable!("prerequisites resolved above"),
    };
    ck.config_hash = cfg.hash();
    let path = checkpoint_path(cfg, stage)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(&path)?;
    Ok((ck, path))
}

fn new_checkpoint(cfg: &RunConfig, stage: Stage, ps: &ParamStore, rng: &ChaCha8Rng) -> Result<Checkpoint> {
    Ok(Checkpoint {
        stage,
        model_hash: cfg.model_hash(),
        config_hash: cfg.hash(),
        ablation: cfg.ablation.clone(),
        params: ps.to_arrays()?,
        ema: BTreeMap::new(),
        curves: BTreeMap::new(),
        action_stats: None,
        rng: RngState::capture(rng),
        parents: BTreeMap::new(),
    })
}

/// Temporal contrastive warm start of the frame encoder with an EMA copy.
pub fn train_warmstart(cfg: &RunConfig, episodes: &[EpisodeRecord]) -> Result<Checkpoint> {
    let usable: Vec<&EpisodeRecord> = episodes.iter().filter(|e| e.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(Error::Precondition("warm start needs two episodes of length >= 2".into()));
    }
    let enc = EncoderDims::from_config(cfg);
    let mut ps = ParamStore::new(DTYPE);
    init_encoder(&mut ps, enc, &mut seed::rng(cfg.seed, Stream::ParamInit, 0))?;
    let mut ema = ps.deep_clone(DTYPE)?;
    ema.freeze_all();
    let mut rng = seed::rng(cfg.seed, Stream::Warmstart, 0);
    let mut tr = Trainer::new(&ps, cfg.warmstart_lr, cfg.grad_clip)?;
    let b = cfg.warmstart_batch.clamp(2, usable.len());
    let aug = AugmentParams::default();
    let mut losses = Vec::with_capacity(cfg.warmstart_iters);
    for it in 0..cfg.warmstart_iters {
        tr.set_lr(cosine_lr(cfg.warmstart_lr, it, cfg.warmstart_iters));
        let picks = sample(&mut rng, usable.len(), b).into_vec();
        let mut imgs: Vec<Vec<u8>> = Vec::with_capacity(2 * b);
        let mut props = Vec::with_capacity(2 * b);
        let mut pos_imgs = Vec::with_capacity(b);
        let mut pos_props = Vec::with_capacity(b);
        for &i in &picks {
            let e = usable[i];
            let (t, u) = sample_pair(e.len(), cfg.delta_max_offset, &mut rng).expect("length >= 2");
            for (tt, img_out, prop_out) in [(t, &mut imgs, &mut props), (u, &mut pos_imgs, &mut pos_props)] {
                let img = if cfg.augment {
                    augment(e.image(tt), &aug, &mut rng)
                } else {
                    e.image(tt).to_vec()
                };
                img_out.push(img);
                prop_out.push(e.proprio[tt]);
            }
        }
        imgs.extend(pos_imgs);
        props.extend(pos_props);
        let refs: Vec<&[u8]> = imgs.iter().map(Vec::as_slice).collect();
        let (f, _) = encode(&ps, enc, &refs, &props)?;
        let loss = info_nce_in_batch(&f.narrow(0, 0, b)?, &f.narrow(0, b, b)?, cfg.tau_temp)?;
        tr.step(&loss)?;
        ema.ema_update(&ps, cfg.tau_ema)?;
        let l = nn::scalar(&loss)?;
        losses.push(l as f32);
        log_progress(Stage::Warmstart, it, cfg.warmstart_iters, cfg.log_every, || format!("loss {l:.4}"));
    }
    let mut ck = new_checkpoint(cfg, Stage::Warmstart, &ps, &rng)?;
    ck.ema = ema.to_arrays()?;
    ck.curves.insert("loss".into(), losses);
    Ok(ck)
}

/// Frame-encoder parameters of a warm-start checkpoint, frozen.
fn frozen_encoder(ck: &Checkpoint) -> Result<ParamStore> {
    let mut ps = ck.store(DTYPE)?.subset("enc.")?;
    if ps.is_empty() {
        return Err(Error::Dependency(format!("{} checkpoint has no frame encoder", ck.stage)));
    }
    ps.freeze_all();
    Ok(ps)
}

/// Prediction targets for the belief objective under `ablation`.
pub fn belief_targets(
    cfg: &RunConfig,
    ablation: AblationConfig,
    warm: &Checkpoint,
    episodes: &[EpisodeRecord],
) -> Result<Vec<Vec<f32>>> {
    if ablation.use_frame_targets {
        if warm.ema.is_empty() {
            return Err(Error::Dependency("warm-start checkpoint lacks the EMA encoder".into()));
        }
        encode_episodes(&warm.ema_store(DTYPE)?, EncoderDims::from_config(cfg), episodes)
    } else {
        let emb = PixelEmbedding::new(cfg.d_f, &mut seed::rng(cfg.seed, Stream::ParamInit, 7));
        Ok(pixel_targets(&emb, episodes))
    }
}

/// Belief world model on frozen frame summaries.
pub fn train_belief(cfg: &RunConfig, warm: &Checkpoint, data: &Split) -> Result<Checkpoint> {
    let ablation = AblationConfig::parse(&cfg.ablation)?;
    if !ablation.needs_belief() {
        return Err(Error::Usage(format!(
            "variant {ablation} does not condition on a belief; train its policy directly"
        )));
    }
    let enc = EncoderDims::from_config(cfg);
    let dims = BeliefDims::from_config(cfg, ablation.use_stochastic_z);
    let min_len = min_episode_len(dims);
    let episodes: Vec<EpisodeRecord> = data
        .train
        .iter()
        .filter(|e| {
            let ok = e.len() >= min_len;
            if !ok {
                tracing::warn!(seed = e.seed, len = e.len(), min_len, "skipping short episode");
            }
            ok
        })
        .cloned()
        .collect();
    if episodes.is_empty() {
        return Err(Error::Precondition(format!("no training episode reaches {min_len} steps")));
    }
    let mut ps = frozen_encoder(warm)?;
    let summaries = encode_episodes(&ps, enc, &episodes)?;
    let targets = belief_targets(cfg, ablation, warm, &episodes)?;
    init_belief(&mut ps, dims, &mut seed::rng(cfg.seed, Stream::ParamInit, 1))?;
    let mut rng = seed::rng(cfg.seed, Stream::Belief, 0);
    let mut tr = Trainer::new(&ps, cfg.belief_lr, cfg.grad_clip)?;
    let kl = KlSchedule::from_config(cfg);
    let b = cfg.belief_batch.clamp(1, episodes.len());
    let names = ["total", "one_step", "five_step", "kl", "inv", "beta"];
    let mut curves: BTreeMap<String, Vec<f32>> = names.iter().map(|n| (n.to_string(), Vec::new())).collect();
    for it in 0..cfg.belief_iters {
        tr.set_lr(cosine_lr(cfg.belief_lr, it, cfg.belief_iters));
        let picks = sample(&mut rng, episodes.len(), b).into_vec();
        let s: Vec<&[f32]> = picks.iter().map(|&i| summaries[i].as_slice()).collect();
        let tg: Vec<&[f32]> = picks.iter().map(|&i| targets[i].as_slice()).collect();
        let a: Vec<&[[f32; ACTION_DIM]]> = picks.iter().map(|&i| episodes[i].actions.as_slice()).collect();
        let p: Vec<&[[f32; 6]]> = picks.iter().map(|&i| episodes[i].proprio.as_slice()).collect();
        let batch = SequenceBatch::build(dims, &s, &tg, &a, &p, DTYPE)?;
        let eps = nn::gaussian(&[batch.t_max(), b, dims.d_z], DTYPE, &mut rng)?;
        let beta = kl.beta(it);
        let weights = LossWeights {
            lambda5: cfg.lambda5,
            beta,
            w_inv: cfg.w_inv,
        };
        let (loss, diag) = belief_rollout_train(&ps, dims, &batch, weights, &eps)?;
        // per-step scale for the optimiser
        let mean_len = batch.lengths.iter().sum::<usize>() as f64 / b as f64;
        tr.step(&(loss / mean_len)?)?;
        for (n, v) in names.iter().zip([diag.total, diag.one_step, diag.five_step, diag.kl, diag.inv, beta]) {
            curves.get_mut(*n).expect("declared curve").push(v as f32);
        }
        log_progress(Stage::Belief, it, cfg.belief_iters, cfg.log_every, || {
            format!(
                "total {:.3} one-step {:.4} five-step {:.4} kl {:.3} inv {:.4} beta {beta:.4}",
                diag.total, diag.one_step, diag.five_step, diag.kl, diag.inv
            )
        });
    }
    let mut ck = new_checkpoint(cfg, Stage::Belief, &ps, &rng)?;
    ck.curves = curves;
    Ok(ck)
}

/// Per-episode inputs of the policy stage.
struct PolicyData {
    summaries: Vec<Vec<f32>>,
    beliefs: Option<Vec<Vec<Vec<f32>>>>,
    tokens: Vec<EpisodeTokens>,
}

/// Intent head and diffusion policy, trained jointly on frozen perception
/// and belief.
pub fn train_policy(cfg: &RunConfig, base: &Checkpoint, data: &Split) -> Result<Checkpoint> {
    let ablation = AblationConfig::parse(&cfg.ablation)?;
    if base.ablation != cfg.ablation && base.stage == Stage::Belief {
        return Err(Error::Config(format!(
            "belief checkpoint trained as {} cannot serve variant {ablation}",
            base.ablation
        )));
    }
    let enc = EncoderDims::from_config(cfg);
    let idims = IntentDims::from_config(cfg);
    let pdims = PolicyDims::from_config(cfg, ablation.use_belief_conditioning);
    let bdims = ablation
        .use_belief_conditioning
        .then(|| BeliefDims::from_config(cfg, ablation.use_stochastic_z));
    let episodes: Vec<EpisodeRecord> = data.train.iter().filter(|e| !e.is_empty()).cloned().collect();
    if episodes.is_empty() {
        return Err(Error::Precondition("no training episodes".into()));
    }

    let mut ps = match bdims {
        Some(_) => {
            let mut ps = base.store(DTYPE)?;
            if !ps.contains("bel.b0") {
                return Err(Error::Dependency("belief checkpoint has no belief parameters".into()));
            }
            ps.freeze_all();
            ps
        }
        None => frozen_encoder(base)?,
    };
    init_intent(&mut ps, idims, cfg.backbone_seed, &mut seed::rng(cfg.seed, Stream::ParamInit, 2))?;
    init_policy(&mut ps, pdims, &mut seed::rng(cfg.seed, Stream::ParamInit, 3))?;

    let summaries = encode_episodes(&ps, enc, &episodes)?;
    let beliefs = match bdims {
        Some(d) => Some(belief_traces(&ps, d, &summaries, &episodes)?),
        None => None,
    };
    let pd = PolicyData {
        tokens: token_rows(&ps, idims, &episodes)?,
        summaries,
        beliefs,
    };
    let stats = ActionStats::from_actions(episodes.iter().flat_map(|e| e.actions.iter()))?;
    let sched = NoiseSchedule::from_config(cfg)?;

    let mut rng = seed::rng(cfg.seed, Stream::Policy, 0);
    let mut tr = Trainer::new(&ps, cfg.policy_lr, cfg.grad_clip)?;
    let b = cfg.policy_batch.max(1);
    let (df, h) = (cfg.d_f, pdims.horizon);
    let mut losses = Vec::with_capacity(cfg.policy_iters);
    for it in 0..cfg.policy_iters {
        tr.set_lr(cosine_lr(cfg.policy_lr, it, cfg.policy_iters));
        let picks: Vec<(usize, usize)> = (0..b)
            .map(|_| {
                let i = rng.random_range(0..episodes.len());
                (i, rng.random_range(0..episodes[i].len()))
            })
            .collect();
        let f: Vec<f32> = picks.iter().flat_map(|&(i, t)| pd.summaries[i][t * df..(t + 1) * df].to_vec()).collect();
        let prop: Vec<[f32; 6]> = picks.iter().map(|&(i, t)| episodes[i].proprio[t]).collect();
        let state = fuse_state(&ps, &nn::matrix(&f, b, df, DTYPE)?, &proprio_tensor(&prop, DTYPE)?)?;
        let belief = match &pd.beliefs {
            Some(bs) => {
                let rows: Vec<f32> = picks.iter().flat_map(|&(i, t)| bs[i][t].clone()).collect();
                Some(nn::matrix(&rows, b, cfg.d_b, DTYPE)?)
            }
            None => None,
        };
        let tok: Vec<&EpisodeTokens> = picks.iter().map(|&(i, _)| &pd.tokens[i]).collect();
        let (intent, _) = intent_head(&ps, &stack_tokens(&tok, idims, DTYPE)?)?;
        let a0: Vec<f32> = picks
            .iter()
            .flat_map(|&(i, t)| chunk_target(&episodes[i].actions, t, h, &stats))
            .collect();
        let a0 = Tensor::from_vec(a0, (b, h, ACTION_DIM), &Device::Cpu)?.to_dtype(DTYPE)?;
        let (steps, eps) = draw_noise(&sched, pdims, b, DTYPE, &mut rng)?;
        let cond = Conditioning { belief, intent, state };
        let loss = diffusion_loss(&ps, pdims, &sched, &a0, &cond, &steps, &eps)?;
        tr.step(&loss)?;
        let l = nn::scalar(&loss)?;
        losses.push(l as f32);
        log_progress(Stage::Policy, it, cfg.policy_iters, cfg.log_every, || format!("loss {l:.4}"));
    }
    let mut ck = new_checkpoint(cfg, Stage::Policy, &ps, &rng)?;
    ck.action_stats = Some(stats);
    ck.curves.insert("loss".into(), losses);
    Ok(ck)
}

/// Executable policy for the configured variant from its policy checkpoint.
pub fn load_policy_stack(cfg: &RunConfig) -> Result<(PolicyStack, Checkpoint)> {
    let ablation = AblationConfig::parse(&cfg.ablation)?;
    let path = checkpoint_path(cfg, Stage::Policy)?;
    let ck = Checkpoint::load_expect(&path, Stage::Policy, &cfg.model_hash())?;
    let trained_as = AblationConfig::parse(&ck.ablation)?;
    let stats = ck
        .action_stats
        .ok_or_else(|| Error::Corrupt {
            path: path.clone(),
            reason: "policy checkpoint lacks action statistics".into(),
        })?;
    let mut ps = ck.store(DTYPE)?;
    ps.freeze_all();
    Ok((build_variant(ablation, trained_as, ps, cfg, stats)?, ck))
}
