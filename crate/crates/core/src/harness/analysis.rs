//! Probes of the trained belief: similarity structure, latent
//! stochasticity, attention over the window, inverse-dynamics grounding.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::belief::{decode_future, inverse_dynamics, latent_heads, unroll, BeliefDims, SequenceBatch, ZChoice};
use crate::error::{Error, Result};
use crate::intent::cosine;
use crate::nn::{self, ParamStore};
use crate::seed::{self, Stream};
use crate::simenv::{action_features, EpisodeRecord, ACTION_DIM};
use crate::stats::{mean, pearson, r_squared, variance};

pub const MIN_PAIRS: usize = 1000;
pub const MIN_EPISODES: usize = 50;
/// Look-ahead of the frame-similarity term.
pub const OBS_AHEAD: usize = 5;

/// Per-step quantities of one held-out episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub beliefs: Vec<Vec<f32>>,
    pub summaries: Vec<Vec<f32>>,
    pub actions: Vec<[f32; ACTION_DIM]>,
}

impl EpisodeTrace {
    pub fn new(beliefs: Vec<Vec<f32>>, summaries_flat: &[f32], d_f: usize, actions: Vec<[f32; ACTION_DIM]>) -> Self {
        Self {
            beliefs,
            summaries: summaries_flat.chunks(d_f).map(<[f32]>::to_vec).collect(),
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub belief_sim: f64,
    /// ℓ2 distance between the next-`H` action sequences.
    pub action_dist: f64,
    /// Cosine between frame summaries `OBS_AHEAD` steps later.
    pub obs_sim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub pairs: Vec<PairSample>,
    pub episodes: usize,
    /// Belief similarity against negated action distance.
    pub pearson_action: f64,
    pub pearson_obs: f64,
    /// Variance of action distance in the least similar fifth of pairs over
    /// that in the most similar fifth.
    pub variance_ratio_bottom_top: f64,
}

/// Metrics of one pair of `(episode, t)` positions.
pub fn pair_metrics(ta: &EpisodeTrace, t: usize, tb: &EpisodeTrace, u: usize, horizon: usize) -> PairSample {
    let d2: f64 = (0..horizon)
        .flat_map(|k| (0..ACTION_DIM).map(move |j| (k, j)))
        .map(|(k, j)| (f64::from(ta.actions[t + k][j]) - f64::from(tb.actions[u + k][j])).powi(2))
        .sum();
    PairSample {
        a: (0, t),
        b: (0, u),
        belief_sim: cosine(&ta.beliefs[t], &tb.beliefs[u]),
        action_dist: d2.sqrt(),
        obs_sim: cosine(&ta.summaries[t + OBS_AHEAD], &tb.summaries[u + OBS_AHEAD]),
    }
}

/// Sample `n_pairs` pairs uniformly over eligible `(episode, t)` positions
/// (`t ≤ T − H − 5`), within and across episodes alike.
pub fn analyze_belief_similarity(
    traces: &[EpisodeTrace],
    n_pairs: usize,
    horizon: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if n_pairs < MIN_PAIRS {
        return Err(Error::Precondition(format!("{n_pairs} pairs requested, at least {MIN_PAIRS} needed")));
    }
    let positions: Vec<(usize, usize)> = traces
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| {
            let last = tr.len().checked_sub(horizon + OBS_AHEAD);
            (0..last.map_or(0, |l| l + 1)).map(move |t| (i, t))
        })
        .collect();
    let used: std::collections::BTreeSet<usize> = positions.iter().map(|p| p.0).collect();
    if used.len() < MIN_EPISODES {
        return Err(Error::Precondition(format!(
            "{} usable held-out episodes, at least {MIN_EPISODES} needed",
            used.len()
        )));
    }
    let mut rng = seed::rng(seed, Stream::Analysis, 0);
    let pairs: Vec<PairSample> = (0..n_pairs)
        .map(|_| {
            let (ea, t) = positions[rng.random_range(0..positions.len())];
            let (eb, u) = positions[rng.random_range(0..positions.len())];
            PairSample {
                a: (ea, t),
                b: (eb, u),
                ..pair_metrics(&traces[ea], t, &traces[eb], u, horizon)
            }
        })
        .collect();
    let bs: Vec<f64> = pairs.iter().map(|p| p.belief_sim).collect();
    let neg_ad: Vec<f64> = pairs.iter().map(|p| -p.action_dist).collect();
    let os: Vec<f64> = pairs.iter().map(|p| p.obs_sim).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| bs[i].total_cmp(&bs[j]));
    let k = pairs.len() / 5;
    let bin_var = |idx: &[usize]| variance(&idx.iter().map(|&i| pairs[i].action_dist).collect::<Vec<_>>());
    let bottom = bin_var(&order[..k]);
    let top = bin_var(&order[pairs.len() - k..]);
    Ok(SimilarityReport {
        episodes: used.len(),
        pearson_action: pearson(&bs, &neg_ad),
        pearson_obs: pearson(&bs, &os),
        variance_ratio_bottom_top: bottom / top,
        pairs,
    })
}

/// `R²` of the inverse-dynamics head on consecutive held-out beliefs,
/// against a constant prediction of `baseline` (mean training action, in
/// the same rescaled units the head predicts).
pub fn inverse_dynamics_r2(
    ps: &ParamStore,
    traces: &[EpisodeTrace],
    baseline: &[f64; ACTION_DIM],
) -> Result<f64> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for tr in traces.iter().filter(|t| t.len() >= 2) {
        let n = tr.len() - 1;
        let d = tr.beliefs[0].len();
        let cur: Vec<f32> = tr.beliefs[..n].iter().flatten().copied().collect();
        let nxt: Vec<f32> = tr.beliefs[1..].iter().flatten().copied().collect();
        let out = inverse_dynamics(ps, &nn::matrix(&cur, n, d, ps.dtype())?, &nn::matrix(&nxt, n, d, ps.dtype())?)?;
        for (row, a) in nn::to_vec2(&out)?.into_iter().zip(&tr.actions) {
            pred.push(row.into_iter().map(f64::from).collect::<Vec<_>>());
            target.push(action_features(a).iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        }
    }
    if pred.is_empty() {
        return Err(Error::Precondition("no consecutive beliefs to evaluate".into()));
    }
    Ok(r_squared(&pred, &target, baseline))
}

/// Mean rescaled action of a set of episodes.
pub fn mean_action_features(episodes: &[EpisodeRecord]) -> [f64; ACTION_DIM] {
    let mut s = [0f64; ACTION_DIM];
    let mut n = 0usize;
    for a in episodes.iter().flat_map(|e| e.actions.iter()) {
        for (acc, v) in s.iter_mut().zip(action_features(a)) {
            *acc += f64::from(v);
        }
        n += 1;
    }
    s.map(|v| v / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticReport {
    pub n_samples: usize,
    /// Pairwise cosine distances of decoded predictions, 1 and 5 steps ahead.
    pub divergence_h1: Vec<Vec<f64>>,
    pub divergence_h5: Vec<Vec<f64>>,
    pub mean_distance_h1: f64,
    pub mean_distance_h5: f64,
    /// First two coordinates of each 1- and 5-step prediction, for the fan plot.
    pub fan: Vec<[f64; 4]>,
    pub kl_curve: Vec<f32>,
    pub kl_final_mean: f64,
}

/// Mean of the last tenth (at least one entry) of a curve.
pub fn final_tenth_mean(curve: &[f32]) -> f64 {
    if curve.is_empty() {
        return f64::NAN;
    }
    let k = curve.len().div_ceil(10);
    mean(&curve[curve.len() - k..].iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
}

fn distance_matrix(rows: &[Vec<f32>]) -> (Vec<Vec<f64>>, f64) {
    let n = rows.len();
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 - cosine(&rows[i], &rows[j]) }).collect())
        .collect();
    let off: Vec<f64> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j]).collect();
    let avg = if off.is_empty() { 0.0 } else { mean(&off) };
    (m, avg)
}

/// Decode `n_samples` prior draws `z ~ p(z | b)` at a fixed belief.
pub fn analyze_stochasticity(
    ps: &ParamStore,
    dims: BeliefDims,
    b: &[f32],
    n_samples: usize,
    seed: u64,
    kl_curve: &[f32],
) -> Result<StochasticReport> {
    if n_samples == 0 || b.len() != dims.d_b {
        return Err(Error::Precondition("need at least one sample and a belief of width d_b".into()));
    }
    let dt = ps.dtype();
    let rep: Vec<f32> = (0..n_samples).flat_map(|_| b.iter().copied()).collect();
    let bt = nn::matrix(&rep, n_samples, dims.d_b, dt)?;
    let z = if dims.stochastic {
        let prior = latent_heads(ps, dims, &bt, None)?;
        let mut rng = seed::rng(seed, Stream::Analysis, 1);
        prior.sample(&nn::gaussian(&[n_samples, dims.d_z], dt, &mut rng)?)?
    } else {
        Tensor::zeros((n_samples, dims.d_z), dt, &Device::Cpu)?
    };
    let p1 = nn::to_vec2(&decode_future(ps, &bt, &z, 1)?)?;
    let p5 = nn::to_vec2(&decode_future(ps, &bt, &z, 5)?)?;
    let (divergence_h1, mean_distance_h1) = distance_matrix(&p1);
    let (divergence_h5, mean_distance_h5) = distance_matrix(&p5);
    let fan = p1
        .iter()
        .zip(&p5)
        .map(|(a, c)| [a[0], a[1], c[0], c[1]].map(f64::from))
        .collect();
    Ok(StochasticReport {
        n_samples,
        divergence_h1,
        divergence_h5,
        mean_distance_h1,
        mean_distance_h5,
        fan,
        kl_curve: kl_curve.to_vec(),
        kl_final_mean: final_tenth_mean(kl_curve),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub timesteps: Vec<usize>,
    /// Belief-position attention over `[belief token, K frame slots]`.
    pub rows: Vec<Vec<f32>>,
    pub occlusion_steps: Vec<usize>,
    /// Mean belief-token weight over the steps right after occlusion events.
    pub post_occlusion_belief_weight: f64,
    pub uniform_level: f64,
}

/// Steps at which a delivered object disappears from view.
pub fn occlusion_events(ep: &EpisodeRecord) -> Vec<usize> {
    (1..ep.gt.len()).filter(|&t| ep.gt[t][6] > ep.gt[t - 1][6]).collect()
}

/// Attention rows of the belief position at `timesteps` (all steps when
/// empty). `window` steps after each occlusion event count as post-occlusion.
pub fn dump_attention(
    ps: &ParamStore,
    dims: BeliefDims,
    summaries: &[f32],
    ep: &EpisodeRecord,
    timesteps: &[usize],
    window: usize,
) -> Result<AttentionDump> {
    let occ = occlusion_events(ep);
    if occ.is_empty() {
        return Err(Error::Precondition("episode contains no occlusion event".into()));
    }
    let batch = SequenceBatch::build(dims, &[summaries], &[summaries], &[&ep.actions], &[&ep.proprio], ps.dtype())?;
    let un = unroll(ps, dims, &batch, &ZChoice::PosteriorMean)?;
    let all = un.attention.squeeze(1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let ts: Vec<usize> = if timesteps.is_empty() {
        (0..ep.len()).collect()
    } else {
        timesteps.to_vec()
    };
    if let Some(&bad) = ts.iter().find(|&&t| t >= ep.len()) {
        return Err(Error::Precondition(format!("timestep {bad} beyond episode of {}", ep.len())));
    }
    let post: Vec<f64> = occ
        .iter()
        .flat_map(|&e| e..(e + window).min(ep.len()))
        .map(|t| f64::from(all[t][0]))
        .collect();
    Ok(AttentionDump {
        rows: ts.iter().map(|&t| all[t].clone()).collect(),
        timesteps: ts,
        occlusion_steps: occ,
        post_occlusion_belief_weight: mean(&post),
        uniform_level: 1.0 / (dims.k + 1) as f64,
    })
}

/// Mean cosine between summaries one step apart, and between summaries of
/// random positions in different episodes.
pub fn temporal_alignment(summaries: &[Vec<Vec<f32>>], n: usize, seed: u64) -> Result<(f64, f64)> {
    let eps: Vec<&Vec<Vec<f32>>> = summaries.iter().filter(|s| s.len() >= 2).collect();
    if eps.len() < 2 {
        return Err(Error::Precondition("alignment needs two episodes of length >= 2".into()));
    }
    let mut rng = seed::rng(seed, Stream::Analysis, 2);
    let mut near = Vec::with_capacity(n);
    let mut far = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..eps.len());
        let t = rng.random_range(0..eps[i].len() - 1);
        near.push(cosine(&eps[i][t], &eps[i][t + 1]));
        let j = (i + rng.random_range(1..eps.len())) % eps.len();
        let u = rng.random_range(0..eps[j].len());
        far.push(cosine(&eps[i][t], &eps[j][u]));
    }
    Ok((mean(&near), mean(&far)))
}
