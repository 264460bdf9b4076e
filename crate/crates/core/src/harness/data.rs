//! Dataset access and the per-episode features precomputed for training and
//! analysis.

use candle_core::{DType, Device, Tensor};

use crate::belief::{unroll, BeliefDims, SequenceBatch, ZChoice};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::intent::{build_token_states, IntentDims, TokenStates};
use crate::nn::ParamStore;
use crate::perception::{encode_frames, EncoderDims, PixelEmbedding};
use crate::simenv::{load_dataset, DatasetConfig, DatasetManifest, EpisodeRecord, TaskKind};

/// Fraction of a dataset (its tail) held out from training.
pub const HELD_OUT_FRAC: f64 = 0.1;

const ENCODE_CHUNK: usize = 256;
const UNROLL_CHUNK: usize = 32;

pub fn dataset_config(cfg: &RunConfig) -> Result<DatasetConfig> {
    Ok(DatasetConfig {
        task: cfg.task.parse::<TaskKind>()?,
        aliased: cfg.aliased,
        distractors: 0,
        horizon: cfg.horizon,
        settle_steps: cfg.settle_steps,
        workers: cfg.workers,
    })
}

pub fn load_run_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<EpisodeRecord>)> {
    let path = cfg.data_path();
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "dataset {path:?} not found; run gen-data first"
        )));
    }
    load_dataset(&path)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<EpisodeRecord>,
    pub held_out: Vec<EpisodeRecord>,
}

/// The last `HELD_OUT_FRAC` of the episodes (at least one when there are
/// two or more) are held out.
pub fn split(mut episodes: Vec<EpisodeRecord>) -> Split {
    let n = episodes.len();
    let k = if n < 2 {
        0
    } else {
        ((n as f64 * HELD_OUT_FRAC).ceil() as usize).clamp(1, n - 1)
    };
    let held_out = episodes.split_off(n - k);
    Split {
        train: episodes,
        held_out,
    }
}

/// Frame summaries `[T_i * d_f]` of every episode under the given encoder.
pub fn encode_episodes(ps: &ParamStore, enc: EncoderDims, episodes: &[EpisodeRecord]) -> Result<Vec<Vec<f32>>> {
    episodes
        .iter()
        .map(|e| {
            let imgs: Vec<&[u8]> = (0..e.len()).map(|t| e.image(t)).collect();
            encode_frames(ps, enc, &imgs, &e.proprio, ENCODE_CHUNK)
        })
        .collect()
}

pub fn pixel_targets(emb: &PixelEmbedding, episodes: &[EpisodeRecord]) -> Vec<Vec<f32>> {
    episodes
        .iter()
        .map(|e| (0..e.len()).flat_map(|t| emb.embed(e.image(t))).collect())
        .collect()
}

/// Posterior-mean beliefs `[T_i][d_b]` of every episode.
pub fn belief_traces(
    ps: &ParamStore,
    dims: BeliefDims,
    summaries: &[Vec<f32>],
    episodes: &[EpisodeRecord],
) -> Result<Vec<Vec<Vec<f32>>>> {
    let mut out = Vec::with_capacity(episodes.len());
    for (eps, sums) in episodes.chunks(UNROLL_CHUNK).zip(summaries.chunks(UNROLL_CHUNK)) {
        let s: Vec<&[f32]> = sums.iter().map(Vec::as_slice).collect();
        let a: Vec<&[[f32; 3]]> = eps.iter().map(|e| e.actions.as_slice()).collect();
        let p: Vec<&[[f32; 6]]> = eps.iter().map(|e| e.proprio.as_slice()).collect();
        let batch = SequenceBatch::build(dims, &s, &s, &a, &p, ps.dtype())?;
        let un = unroll(ps, dims, &batch, &ZChoice::PosteriorMean)?;
        // [T, B, d_b] → per episode
        let b = un.beliefs.transpose(0, 1)?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        for (rows, len) in b.into_iter().zip(&batch.lengths) {
            out.push(rows.into_iter().take(*len).collect());
        }
    }
    Ok(out)
}

/// Frozen backbone rows of one episode: language rows then patch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTokens {
    pub lang: usize,
    /// `[(lang + patches) * D]`.
    pub rows: Vec<f32>,
}

pub fn token_rows(ps: &ParamStore, dims: IntentDims, episodes: &[EpisodeRecord]) -> Result<Vec<EpisodeTokens>> {
    let mut out = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(64) {
        let toks: Vec<&[i32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let imgs: Vec<&[u8]> = chunk.iter().map(|e| e.image(0)).collect();
        let st = build_token_states(ps, dims, &toks, &imgs)?;
        for (i, e) in chunk.iter().enumerate() {
            out.push(EpisodeTokens {
                lang: e.tokens.len(),
                rows: st.rows(i)?.into_iter().flatten().collect(),
            });
        }
    }
    Ok(out)
}

/// Re-pad a batch of precomputed rows into the layout of
/// [`build_token_states`].
pub fn stack_tokens(items: &[&EpisodeTokens], dims: IntentDims, dtype: DType) -> Result<TokenStates> {
    let d = dims.d;
    let np = dims.n_patches();
    let l = items.iter().map(|e| e.lang).max().unwrap_or(0);
    let n = l + np;
    let mut x = vec![0f32; items.len() * n * d];
    let mut valid = Vec::with_capacity(items.len());
    for (b, e) in items.iter().enumerate() {
        if e.rows.len() != (e.lang + np) * d {
            return Err(Error::Shape("token rows do not match the backbone width".into()));
        }
        let base = b * n * d;
        x[base..base + e.lang * d].copy_from_slice(&e.rows[..e.lang * d]);
        x[base + l * d..base + n * d].copy_from_slice(&e.rows[e.lang * d..]);
        valid.push((0..n).map(|j| j < e.lang || j >= l).collect());
    }
    Ok(TokenStates {
        x: Tensor::from_vec(x, (items.len(), n, d), &Device::Cpu)?.to_dtype(dtype)?,
        valid,
    })
}
