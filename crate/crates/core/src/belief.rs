//! Recursive belief estimator.
//!
//! At each step a small window transformer reads the previous belief as a
//! prepended token together with the last `K` (frame summary, previous
//! action, proprio) triples; its output at the belief position is the
//! evidence `e_t`. A diagonal-Gaussian prior `p(z|b_{t-1})` and posterior
//! `q(z|b_{t-1}, e_t)` supply the stochastic latent, and a GRU cell folds
//! `[e_t, z_t]` into `b_t`. Training minimises one- and five-step feature
//! prediction errors, a scheduled KL term and an inverse-dynamics loss.

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, Init, ParamStore};
use crate::simenv::{action_features, proprio_features, ACTION_DIM, PROPRIO_DIM};

pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeliefDims {
    pub d_f: usize,
    pub d_b: usize,
    pub d_z: usize,
    pub k: usize,
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Whether the stochastic latent is used; otherwise `z ≡ 0` and no KL.
    pub stochastic: bool,
}

impl BeliefDims {
    pub fn from_config(cfg: &RunConfig, stochastic: bool) -> Self {
        Self {
            d_f: cfg.d_f,
            d_b: cfg.d_b,
            d_z: cfg.d_z,
            k: cfg.k_window,
            blocks: cfg.belief_blocks,
            heads: cfg.belief_heads,
            hidden: cfg.d_b * cfg.hidden_mult,
            stochastic,
        }
    }

    /// Width of one raw window entry.
    pub fn d_in(&self) -> usize {
        self.d_f + ACTION_DIM + PROPRIO_DIM
    }

    /// Floats kept across inference steps: the belief plus the raw window.
    pub fn retained_floats(&self) -> usize {
        self.d_b + self.k * self.d_in()
    }
}

pub fn init_belief<R: Rng>(ps: &mut ParamStore, dims: BeliefDims, rng: &mut R) -> Result<()> {
    if dims.blocks == 0 || dims.k == 0 {
        return Err(Error::Config("belief needs at least one block and K >= 1".into()));
    }
    let (db, dz, h) = (dims.d_b, dims.d_z, dims.hidden);
    ps.create("bel.b0", &[db], Init::Normal(0.1), rng)?;
    ps.create("bel.pad", &[db], Init::Normal(0.1), rng)?;
    ps.create("bel.pos", &[dims.k + 1, db], Init::Normal(0.1), rng)?;
    nn::init_linear(ps, "bel.in", dims.d_in(), db, rng)?;
    nn::init_linear(ps, "bel.bproj", db, db, rng)?;
    let bd = BlockDims {
        d: db,
        heads: dims.heads,
        hidden: h,
    };
    for i in 0..dims.blocks {
        nn::init_block(ps, &format!("bel.blk{i}"), bd, rng)?;
    }
    nn::init_mlp(ps, "bel.prior", db, h, 2 * dz, rng)?;
    nn::init_mlp(ps, "bel.post", 2 * db, h, 2 * dz, rng)?;
    nn::init_linear(ps, "bel.gru.x", db + dz, 3 * db, rng)?;
    nn::init_linear(ps, "bel.gru.h", db, 3 * db, rng)?;
    nn::init_mlp(ps, "bel.dec1", db + dz, h, dims.d_f, rng)?;
    nn::init_mlp(ps, "bel.dec5", db + dz, h, dims.d_f, rng)?;
    nn::init_mlp(ps, "bel.inv", 2 * db, h, ACTION_DIM, rng)
}

/// One raw window entry: frame summary at τ, action executed at τ−1, proprio at τ.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub f: Vec<f32>,
    pub prev_action: [f32; ACTION_DIM],
    pub proprio: [f32; PROPRIO_DIM],
}

impl Triple {
    /// Network input row: summary, rescaled action, rescaled proprio.
    pub fn features(&self) -> Vec<f32> {
        let mut v = self.f.clone();
        v.extend(action_features(&self.prev_action));
        v.extend(proprio_features(&self.proprio));
        v
    }
}

/// Diagonal Gaussian `N(μ, σ²)`; tensors `[B, D_z]`.
#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianLatent {
    /// `z = μ + σ ⊙ ε`.
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mu + (&self.sigma * eps)?)?)
    }
}

/// Prior (`e = None`) or posterior head; `σ = softplus(raw) + 1e-4`.
pub fn latent_heads(
    ps: &ParamStore,
    dims: BeliefDims,
    b_prev: &Tensor,
    e: Option<&Tensor>,
) -> Result<GaussianLatent> {
    let raw = match e {
        None => nn::mlp(ps, "bel.prior", b_prev)?,
        Some(e) => nn::mlp(ps, "bel.post", &Tensor::cat(&[b_prev, e], D::Minus1)?)?,
    };
    let last = raw.rank() - 1;
    let mu = raw.narrow(last, 0, dims.d_z)?;
    let sigma = (nn::softplus(&raw.narrow(last, dims.d_z, dims.d_z)?)? + SIGMA_FLOOR)?;
    Ok(GaussianLatent { mu, sigma })
}

/// `KL(q ‖ p)` summed over the last axis.
pub fn gaussian_kl(q: &GaussianLatent, p: &GaussianLatent) -> Result<Tensor> {
    if q.mu.dims() != p.mu.dims() || q.sigma.dims() != p.sigma.dims() {
        return Err(Error::Shape(format!(
            "KL between {:?} and {:?}",
            q.mu.dims(),
            p.mu.dims()
        )));
    }
    let log_ratio = (p.sigma.log()? - q.sigma.log()?)?;
    let num = (q.sigma.sqr()? + (&q.mu - &p.mu)?.sqr()?)?;
    let quad = (num / (p.sigma.sqr()? * 2.0)?)?;
    Ok(((log_ratio + quad)? - 0.5)?.sum(D::Minus1)?)
}

/// `b_t = (1−u)⊙b_{t−1} + u⊙h̃` with reset gate `r`, update gate `u` and
/// candidate `h̃ = tanh(W_x x + r⊙(W_h b + c))`, `x = [e, z]`.
pub fn gru_update(ps: &ParamStore, b_prev: &Tensor, e: &Tensor, z: &Tensor) -> Result<Tensor> {
    let db = b_prev.dim(D::Minus1)?;
    let x = Tensor::cat(&[e, z], D::Minus1)?;
    let gx = nn::linear(ps, "bel.gru.x", &x)?;
    let gh = nn::linear(ps, "bel.gru.h", b_prev)?;
    let last = gx.rank() - 1;
    let part = |t: &Tensor, i: usize| t.narrow(last, i * db, db);
    let r = candle_nn::ops::sigmoid(&(part(&gx, 0)? + part(&gh, 0)?)?)?;
    let u = candle_nn::ops::sigmoid(&(part(&gx, 1)? + part(&gh, 1)?)?)?;
    let cand = (part(&gx, 2)? + (r * part(&gh, 2)?)?)?.tanh()?;
    Ok((b_prev + (u * (cand - b_prev)?)?)?)
}

/// Predicted target features `horizon` steps ahead from `(b_t, z_t)`.
pub fn decode_future(ps: &ParamStore, b: &Tensor, z: &Tensor, horizon: usize) -> Result<Tensor> {
    let name = match horizon {
        1 => "bel.dec1",
        5 => "bel.dec5",
        _ => {
            return Err(Error::Precondition(format!(
                "decoder horizon {horizon} unsupported (1 or 5)"
            )))
        }
    };
    nn::mlp(ps, name, &Tensor::cat(&[b, z], D::Minus1)?)
}

/// Action estimate from consecutive beliefs.
pub fn inverse_dynamics(ps: &ParamStore, b_t: &Tensor, b_next: &Tensor) -> Result<Tensor> {
    nn::mlp(ps, "bel.inv", &Tensor::cat(&[b_t, b_next], D::Minus1)?)
}

/// Embed raw window rows `[.., d_in]` into belief width.
pub fn embed_rows(ps: &ParamStore, raw: &Tensor) -> Result<Tensor> {
    nn::linear(ps, "bel.in", raw)
}

/// Belief token `[B, 1, d_b]`.
fn belief_token(ps: &ParamStore, b_prev: &Tensor) -> Result<Tensor> {
    let pos0 = ps.get("bel.pos")?.narrow(0, 0, 1)?;
    Ok(nn::linear(ps, "bel.bproj", b_prev)?
        .unsqueeze(1)?
        .broadcast_add(&pos0)?)
}

/// Frame slots of a window `[B, K, d_b]`, embedded and with positions added.
fn frame_slots(ps: &ParamStore, dims: BeliefDims, embedded: &Tensor) -> Result<Tensor> {
    let pos = ps.get("bel.pos")?.narrow(0, 1, dims.k)?;
    Ok(embedded.broadcast_add(&pos)?)
}

/// Evidence from the belief token and frame slots (`[B, K, d_b]`, positions
/// included). Returns `e_t [B, d_b]` and the head-averaged attention row of
/// the belief position over `[belief, slot_1..slot_K]`, `[B, K+1]`.
fn evidence_from_slots(
    ps: &ParamStore,
    dims: BeliefDims,
    b_prev: &Tensor,
    slots: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let bt = belief_token(ps, b_prev)?;
    let mut x = Tensor::cat(&[&bt, slots], 1)?;
    for i in 0..dims.blocks - 1 {
        x = nn::block(ps, &format!("bel.blk{i}"), &x, dims.heads, None)?.0;
    }
    let last = format!("bel.blk{}", dims.blocks - 1);
    let (k, v) = nn::block_kv(ps, &last, &x, dims.heads)?;
    let (out, p) = nn::block_with_kv(ps, &last, &x.narrow(1, 0, 1)?, &k, &v, dims.heads, None)?;
    Ok((out.squeeze(1)?, p.squeeze(2)?.mean(1)?))
}

/// Same as [`evidence_from_slots`] for a single block, with the frame keys
/// and values (`[B, h, K, d_b/h]`) computed ahead of time.
fn evidence_from_kv(
    ps: &ParamStore,
    dims: BeliefDims,
    b_prev: &Tensor,
    kf: &Tensor,
    vf: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let bt = belief_token(ps, b_prev)?;
    let (kb, vb) = nn::block_kv(ps, "bel.blk0", &bt, dims.heads)?;
    let k = Tensor::cat(&[&kb, kf], 2)?;
    let v = Tensor::cat(&[&vb, vf], 2)?;
    let (out, p) = nn::block_with_kv(ps, "bel.blk0", &bt, &k, &v, dims.heads, None)?;
    Ok((out.squeeze(1)?, p.squeeze(2)?.mean(1)?))
}

/// Embed a batch of windows (each 1..=K triples, oldest first) into frame
/// slots `[B, K, d_b]`, left-padded with the learned pad token.
pub fn window_slots(ps: &ParamStore, dims: BeliefDims, windows: &[&[Triple]]) -> Result<Tensor> {
    let b = windows.len();
    let d_in = dims.d_in();
    let mut raw = vec![0f32; b * dims.k * d_in];
    let mut valid = vec![0f32; b * dims.k];
    for (i, w) in windows.iter().enumerate() {
        if w.is_empty() {
            return Err(Error::Precondition("empty observation window".into()));
        }
        if w.len() > dims.k {
            return Err(Error::Precondition(format!(
                "window of {} exceeds K = {}",
                w.len(),
                dims.k
            )));
        }
        let offset = dims.k - w.len();
        for (j, tr) in w.iter().enumerate() {
            if tr.f.len() != dims.d_f {
                return Err(Error::Shape(format!(
                    "frame summary of width {} (expected {})",
                    tr.f.len(),
                    dims.d_f
                )));
            }
            let slot = i * dims.k + offset + j;
            raw[slot * d_in..(slot + 1) * d_in].copy_from_slice(&tr.features());
            valid[slot] = 1.0;
        }
    }
    let dt = ps.dtype();
    let raw = Tensor::from_vec(raw, (b, dims.k, d_in), &Device::Cpu)?.to_dtype(dt)?;
    let valid = Tensor::from_vec(valid, (b, dims.k, 1), &Device::Cpu)?.to_dtype(dt)?;
    let emb = embed_rows(ps, &raw)?;
    let pad = ps.get("bel.pad")?.reshape((1, 1, dims.d_b))?;
    let mixed = (emb.broadcast_mul(&valid)? + pad.broadcast_mul(&valid.affine(-1.0, 1.0)?)?)?;
    frame_slots(ps, dims, &mixed)
}

/// Evidence `e_t` for a batch of beliefs and windows, with the attention
/// row of the belief position.
pub fn temporal_integrate(
    ps: &ParamStore,
    dims: BeliefDims,
    b_prev: &Tensor,
    windows: &[&[Triple]],
) -> Result<(Tensor, Tensor)> {
    let slots = window_slots(ps, dims, windows)?;
    evidence_from_slots(ps, dims, b_prev, &slots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Posterior,
    Prior,
}

/// One inference step: evidence, latent mean under `mode`, GRU update.
pub fn belief_infer_step(
    ps: &ParamStore,
    dims: BeliefDims,
    b_prev: &Tensor,
    windows: &[&[Triple]],
    mode: LatentMode,
) -> Result<(Tensor, Option<GaussianLatent>, Tensor)> {
    let (e, attn) = temporal_integrate(ps, dims, b_prev, windows)?;
    let (z, latent) = if dims.stochastic {
        let g = match mode {
            LatentMode::Posterior => latent_heads(ps, dims, b_prev, Some(&e))?,
            LatentMode::Prior => latent_heads(ps, dims, b_prev, None)?,
        };
        (g.mu.clone(), Some(g))
    } else {
        (Tensor::zeros((e.dim(0)?, dims.d_z), e.dtype(), &Device::Cpu)?, None)
    };
    let b = gru_update(ps, b_prev, &e, &z)?;
    Ok((b, latent, attn))
}

/// Initial belief broadcast to a batch, `[B, d_b]`.
pub fn initial_belief(ps: &ParamStore, dims: BeliefDims, batch: usize) -> Result<Tensor> {
    Ok(ps
        .get("bel.b0")?
        .reshape((1, dims.d_b))?
        .broadcast_as((batch, dims.d_b))?
        .contiguous()?)
}

/// Streaming belief for one episode. Retains only the belief vector and the
/// last `K` raw triples.
#[derive(Debug, Clone)]
pub struct BeliefTracker {
    pub dims: BeliefDims,
    pub mode: LatentMode,
    b: Vec<f32>,
    window: VecDeque<Triple>,
    last_attention: Vec<f32>,
}

impl BeliefTracker {
    pub fn new(ps: &ParamStore, dims: BeliefDims, mode: LatentMode) -> Result<Self> {
        Ok(Self {
            dims,
            mode,
            b: nn::to_vec1(&ps.get("bel.b0")?)?,
            window: VecDeque::with_capacity(dims.k),
            last_attention: Vec::new(),
        })
    }

    pub fn belief(&self) -> &[f32] {
        &self.b
    }

    pub fn last_attention(&self) -> &[f32] {
        &self.last_attention
    }

    /// Push the newest triple and advance the belief one step.
    pub fn step(&mut self, ps: &ParamStore, triple: Triple) -> Result<&[f32]> {
        if self.window.len() == self.dims.k {
            self.window.pop_front();
        }
        self.window.push_back(triple);
        let w: Vec<Triple> = self.window.iter().cloned().collect();
        let b_prev = nn::matrix(&self.b, 1, self.dims.d_b, ps.dtype())?;
        let (b, _, attn) = belief_infer_step(ps, self.dims, &b_prev, &[&w], self.mode)?;
        self.b = nn::to_vec1(&b)?;
        self.last_attention = nn::to_vec1(&attn)?;
        Ok(&self.b)
    }

    /// Floats currently held across steps.
    pub fn retained_floats(&self) -> usize {
        self.b.len() + self.dims.k * self.dims.d_in()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

/// Inputs for a batched unroll over `B` episodes padded to a common length `T`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `[B, T, d_in]` raw window rows (summary, previous action, proprio).
    pub raw: Tensor,
    /// `[B, T, d_f]` prediction targets.
    pub targets: Tensor,
    /// `[B, T, A]` rescaled executed actions `a_t`.
    pub actions: Tensor,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Assemble from per-episode rows. `summaries[i]` is `[T_i * d_f]`,
    /// `targets[i]` likewise; actions and proprio are raw simulator values.
    pub fn build(
        dims: BeliefDims,
        summaries: &[&[f32]],
        targets: &[&[f32]],
        actions: &[&[[f32; ACTION_DIM]]],
        proprio: &[&[[f32; PROPRIO_DIM]]],
        dtype: DType,
    ) -> Result<Self> {
        let b = summaries.len();
        let lengths: Vec<usize> = actions.iter().map(|a| a.len()).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::Precondition("empty sequence batch".into()));
        }
        let (df, din) = (dims.d_f, dims.d_in());
        let mut raw = vec![0f32; b * t_max * din];
        let mut tg = vec![0f32; b * t_max * df];
        let mut act = vec![0f32; b * t_max * ACTION_DIM];
        for i in 0..b {
            let t_i = lengths[i];
            if summaries[i].len() != t_i * df || targets[i].len() != t_i * df || proprio[i].len() != t_i {
                return Err(Error::Shape(format!("episode {i}: inconsistent sequence lengths")));
            }
            for t in 0..t_i {
                let prev = if t == 0 { [0.0; ACTION_DIM] } else { actions[i][t - 1] };
                let tr = Triple {
                    f: summaries[i][t * df..(t + 1) * df].to_vec(),
                    prev_action: prev,
                    proprio: proprio[i][t],
                };
                let o = (i * t_max + t) * din;
                raw[o..o + din].copy_from_slice(&tr.features());
                let o = (i * t_max + t) * df;
                tg[o..o + df].copy_from_slice(&targets[i][t * df..(t + 1) * df]);
                let o = (i * t_max + t) * ACTION_DIM;
                act[o..o + ACTION_DIM].copy_from_slice(&action_features(&actions[i][t]));
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            raw: Tensor::from_vec(raw, (b, t_max, din), &dev)?.to_dtype(dtype)?,
            targets: Tensor::from_vec(tg, (b, t_max, df), &dev)?.to_dtype(dtype)?,
            actions: Tensor::from_vec(act, (b, t_max, ACTION_DIM), &dev)?.to_dtype(dtype)?,
            lengths,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// `[T, B]` mask of steps `t` with `t + ahead < length`.
    fn mask(&self, ahead: usize, dtype: DType) -> Result<Tensor> {
        let (b, t_max) = (self.batch(), self.t_max());
        let mut m = vec![0f32; t_max * b];
        for (i, &len) in self.lengths.iter().enumerate() {
            for t in 0..t_max {
                if t + ahead < len {
                    m[t * b + i] = 1.0;
                }
            }
        }
        Ok(Tensor::from_vec(m, (t_max, b), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// How `z_t` is chosen during an unroll.
#[derive(Debug, Clone)]
pub enum ZChoice {
    /// Reparameterised posterior sample with `ε: [T, B, d_z]`.
    Sample(Tensor),
    PosteriorMean,
    PriorMean,
}

/// Per-step quantities of an unroll, stacked over time (`[T, B, ..]`).
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub beliefs: Tensor,
    pub prev_beliefs: Tensor,
    pub z: Tensor,
    pub posterior: Option<GaussianLatent>,
    /// `[T, B, K+1]` attention rows of the belief position.
    pub attention: Tensor,
}

/// Run the recursion over a padded batch in lockstep.
pub fn unroll(
    ps: &ParamStore,
    dims: BeliefDims,
    batch: &SequenceBatch,
    choice: &ZChoice,
) -> Result<Unrolled> {
    let (b, t_max) = (batch.batch(), batch.t_max());
    let dt = ps.dtype();
    let (db, k) = (dims.d_b, dims.k);

    // Every window slot, gathered once: pad row appended at index T per episode.
    let emb = embed_rows(ps, &batch.raw)?;
    let pad = ps.get("bel.pad")?.reshape((1, 1, db))?.broadcast_as((b, 1, db))?;
    let table = Tensor::cat(&[&emb, &pad.contiguous()?], 1)?.reshape((b * (t_max + 1), db))?;
    let mut idx = Vec::with_capacity(b * t_max * k);
    for i in 0..b {
        for t in 0..t_max {
            for j in 0..k {
                let tau = t as isize - (k - 1 - j) as isize;
                let row = if tau >= 0 { tau as usize } else { t_max };
                idx.push((i * (t_max + 1) + row) as u32);
            }
        }
    }
    let idx = Tensor::from_vec(idx, b * t_max * k, &Device::Cpu)?;
    let slots = table
        .index_select(&idx, 0)?
        .reshape((b, t_max, k, db))?
        .broadcast_add(&ps.get("bel.pos")?.narrow(0, 1, k)?)?;

    let precomputed = if dims.blocks == 1 {
        let (kf, vf) = nn::block_kv(ps, "bel.blk0", &slots.reshape((b * t_max, k, db))?, dims.heads)?;
        let dh = db / dims.heads;
        Some((
            kf.reshape((b, t_max, dims.heads, k, dh))?,
            vf.reshape((b, t_max, dims.heads, k, dh))?,
        ))
    } else {
        None
    };

    let mut bel = initial_belief(ps, dims, b)?;
    let zeros = Tensor::zeros((b, dims.d_z), dt, &Device::Cpu)?;
    let (mut bs, mut prevs, mut zs, mut mus, mut sigmas, mut attns) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for t in 0..t_max {
        let (e, attn) = match &precomputed {
            Some((kf, vf)) => evidence_from_kv(
                ps,
                dims,
                &bel,
                &kf.narrow(1, t, 1)?.squeeze(1)?,
                &vf.narrow(1, t, 1)?.squeeze(1)?,
            )?,
            None => evidence_from_slots(ps, dims, &bel, &slots.narrow(1, t, 1)?.squeeze(1)?)?,
        };
        let z = if dims.stochastic {
            let z = match choice {
                ZChoice::Sample(eps) => {
                    let q = latent_heads(ps, dims, &bel, Some(&e))?;
                    let z = q.sample(&eps.get(t)?)?;
                    mus.push(q.mu);
                    sigmas.push(q.sigma);
                    z
                }
                ZChoice::PosteriorMean => {
                    let q = latent_heads(ps, dims, &bel, Some(&e))?;
                    let z = q.mu.clone();
                    mus.push(q.mu);
                    sigmas.push(q.sigma);
                    z
                }
                ZChoice::PriorMean => latent_heads(ps, dims, &bel, None)?.mu,
            };
            z
        } else {
            zeros.clone()
        };
        let next = gru_update(ps, &bel, &e, &z)?;
        prevs.push(bel);
        bel = next;
        bs.push(bel.clone());
        zs.push(z);
        attns.push(attn);
    }
    let posterior = if mus.is_empty() {
        None
    } else {
        Some(GaussianLatent {
            mu: Tensor::stack(&mus, 0)?,
            sigma: Tensor::stack(&sigmas, 0)?,
        })
    };
    Ok(Unrolled {
        beliefs: Tensor::stack(&bs, 0)?,
        prev_beliefs: Tensor::stack(&prevs, 0)?,
        z: Tensor::stack(&zs, 0)?,
        posterior,
        attention: Tensor::stack(&attns, 0)?,
    })
}

/// Weights of the belief objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda5: f64,
    pub beta: f64,
    pub w_inv: f64,
}

/// Linear warm-up of β from `start` to `end` over the first `warmup_frac`
/// of `total` iterations, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlSchedule {
    pub start: f64,
    pub end: f64,
    pub warmup_frac: f64,
    pub total: usize,
}

impl KlSchedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            start: cfg.kl_beta_start,
            end: cfg.kl_beta_end,
            warmup_frac: cfg.kl_warmup_frac,
            total: cfg.belief_iters,
        }
    }

    pub fn beta(&self, iter: usize) -> f64 {
        let warm = self.warmup_frac * self.total as f64;
        if warm <= 0.0 || iter as f64 >= warm {
            self.end
        } else {
            self.start + (self.end - self.start) * iter as f64 / warm
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BeliefDiagnostics {
    pub total: f64,
    /// Per-step means.
    pub one_step: f64,
    pub five_step: f64,
    pub kl: f64,
    pub inv: f64,
    pub steps: usize,
}

fn masked_sum(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok((values * mask)?.sum_all()?)
}

/// Shortest episode the objective accepts.
pub fn min_episode_len(dims: BeliefDims) -> usize {
    dims.k + 6
}

/// Objective over a batch: per episode
/// `Σ_t ½‖x̂_{t+1}−x_{t+1}‖² + λ·½‖x̂_{t+5}−x_{t+5}‖² + β·KL(q_t‖p_t) + w_inv·‖g(b_t,b_{t+1})−a_t‖²`,
/// averaged over episodes. `eps: [T, B, d_z]` drives the posterior samples.
pub fn belief_rollout_train(
    ps: &ParamStore,
    dims: BeliefDims,
    batch: &SequenceBatch,
    weights: LossWeights,
    eps: &Tensor,
) -> Result<(Tensor, BeliefDiagnostics)> {
    if let Some(&l) = batch.lengths.iter().find(|&&l| l < min_episode_len(dims)) {
        return Err(Error::Precondition(format!(
            "episode of {l} steps is shorter than K + 6 = {}",
            min_episode_len(dims)
        )));
    }
    let dt = ps.dtype();
    let un = unroll(ps, dims, batch, &ZChoice::Sample(eps.clone()))?;
    let t_max = batch.t_max();
    let nb = batch.batch() as f64;
    let targets = batch.targets.transpose(0, 1)?.contiguous()?; // [T, B, d_f]
    let actions = batch.actions.transpose(0, 1)?.contiguous()?;
    let m0 = batch.mask(0, dt)?;
    let m1 = batch.mask(1, dt)?;
    let m5 = batch.mask(5, dt)?;

    let sq = |pred: &Tensor, target: &Tensor| -> Result<Tensor> {
        Ok((pred - target)?.sqr()?.sum(D::Minus1)?)
    };

    // one-step and five-step terms
    let pred1 = decode_future(ps, &un.beliefs, &un.z, 1)?;
    let next1 = shift_time(&targets, 1)?;
    let l1 = (masked_sum(&sq(&pred1, &next1)?, &m1)? * 0.5)?;
    let (l5, n5) = if t_max > 5 {
        let pred5 = decode_future(ps, &un.beliefs, &un.z, 5)?;
        let next5 = shift_time(&targets, 5)?;
        (
            (masked_sum(&sq(&pred5, &next5)?, &m5)? * 0.5)?,
            nn::scalar(&m5.sum_all()?)?,
        )
    } else {
        (Tensor::zeros((), dt, &Device::Cpu)?, 0.0)
    };

    let kl = match &un.posterior {
        Some(q) => {
            let p = latent_heads(ps, dims, &un.prev_beliefs, None)?;
            masked_sum(&gaussian_kl(q, &p)?, &m0)?
        }
        None => Tensor::zeros((), dt, &Device::Cpu)?,
    };

    let next_b = shift_time(&un.beliefs, 1)?;
    let inv = masked_sum(&sq(&inverse_dynamics(ps, &un.beliefs, &next_b)?, &actions)?, &m1)?;

    let total = ((((&l1 + (&l5 * weights.lambda5)?)? + (&kl * weights.beta)?)?
        + (&inv * weights.w_inv)?)?
        / nb)?;

    let n0 = nn::scalar(&m0.sum_all()?)?;
    let n1 = nn::scalar(&m1.sum_all()?)?;
    let diag = BeliefDiagnostics {
        total: nn::scalar(&total)?,
        one_step: nn::scalar(&l1)? / n1.max(1.0),
        five_step: nn::scalar(&l5)? / n5.max(1.0),
        kl: nn::scalar(&kl)? / n0.max(1.0),
        inv: nn::scalar(&inv)? / n1.max(1.0),
        steps: n0 as usize,
    };
    Ok((total, diag))
}

/// `x[t + s]` along axis 0, zero beyond the end.
fn shift_time(x: &Tensor, s: usize) -> Result<Tensor> {
    let t = x.dim(0)?;
    if s >= t {
        return Ok(x.zeros_like()?);
    }
    let mut pad_shape = x.dims().to_vec();
    pad_shape[0] = s;
    let pad = Tensor::zeros(pad_shape, x.dtype(), &Device::Cpu)?;
    Ok(Tensor::cat(&[&x.narrow(0, s, t - s)?, &pad], 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BeliefDims {
        BeliefDims {
            d_f: 6,
            d_b: 8,
            d_z: 4,
            k: 3,
            blocks: 1,
            heads: 2,
            hidden: 10,
            stochastic: true,
        }
    }

    fn store(d: BeliefDims, seed: u64) -> ParamStore {
        let mut ps = ParamStore::new(DType::F64);
        init_belief(&mut ps, d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ps
    }

    fn triple(d: &BeliefDims, v: f32) -> Triple {
        Triple {
            f: (0..d.d_f).map(|i| v + i as f32 * 0.1).collect(),
            prev_action: [0.01, -0.02, 1.0],
            proprio: [0.4, 0.6, 0.0, 0.0, 1.0, 0.0],
        }
    }

    fn gauss(mu: &[f64], sigma: &[f64]) -> GaussianLatent {
        let n = mu.len();
        GaussianLatent {
            mu: Tensor::from_slice(mu, (1, n), &Device::Cpu).unwrap(),
            sigma: Tensor::from_slice(sigma, (1, n), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn evidence_depends_on_previous_belief() {
        let d = dims();
        let ps = store(d, 1);
        let w = vec![triple(&d, 0.3); d.k];
        let b1 = Tensor::zeros((1, d.d_b), DType::F64, &Device::Cpu).unwrap();
        let b2 = Tensor::ones((1, d.d_b), DType::F64, &Device::Cpu).unwrap();
        let (e1, a1) = temporal_integrate(&ps, d, &b1, &[&w]).unwrap();
        let (e2, _) = temporal_integrate(&ps, d, &b2, &[&w]).unwrap();
        assert_eq!(e1.dims(), [1, d.d_b]);
        assert_ne!(nn::to_vec1(&e1).unwrap(), nn::to_vec1(&e2).unwrap());
        let a = a1.to_vec2::<f64>().unwrap();
        assert_eq!(a[0].len(), d.k + 1);
        assert!((a[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn short_windows_and_errors() {
        let d = dims();
        let ps = store(d, 1);
        let b = initial_belief(&ps, d, 1).unwrap();
        for len in 1..=d.k {
            let w = vec![triple(&d, 0.1); len];
            let (e, _) = temporal_integrate(&ps, d, &b, &[&w]).unwrap();
            assert_eq!(e.dims(), [1, d.d_b]);
        }
        let empty: Vec<Triple> = vec![];
        assert!(matches!(
            temporal_integrate(&ps, d, &b, &[&empty]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn multi_block_path_matches_single_block_shape() {
        let d = BeliefDims { blocks: 2, ..dims() };
        let ps = store(d, 2);
        let b = initial_belief(&ps, d, 2).unwrap();
        let w = vec![triple(&d, 0.2); 2];
        let (e, a) = temporal_integrate(&ps, d, &b, &[&w, &w]).unwrap();
        assert_eq!(e.dims(), [2, d.d_b]);
        assert_eq!(a.dims(), [2, d.k + 1]);
    }

    #[test]
    fn sigma_positive_and_reparameterisation() {
        let d = dims();
        let ps = store(d, 3);
        for scale in [-100.0, 0.0, 100.0] {
            let b = Tensor::full(scale, (2, d.d_b), &Device::Cpu).unwrap();
            let g = latent_heads(&ps, d, &b, None).unwrap();
            let s = g.sigma.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(s.iter().all(|&v| v >= SIGMA_FLOOR && v.is_finite()));
            let z = g.sample(&g.mu.zeros_like().unwrap()).unwrap();
            assert_eq!(nn::to_vec1(&z).unwrap(), nn::to_vec1(&g.mu).unwrap());
        }
    }

    #[test]
    fn reparameterised_sample_mean_matches_mu() {
        let g = gauss(&[0.7, -1.2], &[0.5, 2.0]);
        let n = 100_000;
        let eps = Tensor::randn(0f64, 1.0, (n, 2), &Device::Cpu).unwrap();
        let mu = g.mu.broadcast_as((n, 2)).unwrap();
        let sigma = g.sigma.broadcast_as((n, 2)).unwrap();
        let z = GaussianLatent { mu, sigma }.sample(&eps).unwrap();
        let m = z.mean(0).unwrap().to_vec1::<f64>().unwrap();
        for (i, (&mu, &s)) in [0.7, -1.2].iter().zip(&[0.5f64, 2.0]).enumerate() {
            assert!((m[i] - mu).abs() < 3.0 * s / (n as f64).sqrt() * 1.5);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let p = gauss(&[0.0], &[1.0]);
        assert_eq!(nn::scalar(&gaussian_kl(&p, &p).unwrap().sum_all().unwrap()).unwrap(), 0.0);
        let q = gauss(&[1.0], &[1.0]);
        let v = nn::scalar(&gaussian_kl(&q, &p).unwrap().sum_all().unwrap()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let q = gauss(&[0.0], &[2.0]);
        let v = nn::scalar(&gaussian_kl(&q, &p).unwrap().sum_all().unwrap()).unwrap();
        assert!((v - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-12);
        let q2 = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(gaussian_kl(&q2, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gru_gate_limits() {
        let d = dims();
        let ps = store(d, 4);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut x = ParamStore::new(DType::F64);
        x.create("h", &[1, d.d_b], Init::Normal(0.5), &mut r).unwrap();
        x.create("e", &[1, d.d_b], Init::Normal(0.5), &mut r).unwrap();
        x.create("z", &[1, d.d_z], Init::Normal(0.5), &mut r).unwrap();
        let (h, e, z) = (x.get("h").unwrap(), x.get("e").unwrap(), x.get("z").unwrap());
        for i in 0..d.d_b {
            ps.nudge("bel.gru.x.b", d.d_b + i, -1e4).unwrap();
        }
        let out = gru_update(&ps, &h, &e, &z).unwrap();
        assert_eq!(nn::to_vec1(&out).unwrap(), nn::to_vec1(&h).unwrap());
        for i in 0..d.d_b {
            ps.nudge("bel.gru.x.b", d.d_b + i, 2e4).unwrap();
        }
        let out = gru_update(&ps, &h, &e, &z).unwrap().to_vec2::<f64>().unwrap();
        // candidate computed directly
        let gx = nn::linear(&ps, "bel.gru.x", &Tensor::cat(&[&e, &z], 1).unwrap()).unwrap();
        let gh = nn::linear(&ps, "bel.gru.h", &h).unwrap();
        let r = candle_nn::ops::sigmoid(&(gx.narrow(1, 0, d.d_b).unwrap() + gh.narrow(1, 0, d.d_b).unwrap()).unwrap()).unwrap();
        let cand = (gx.narrow(1, 2 * d.d_b, d.d_b).unwrap() + (r * gh.narrow(1, 2 * d.d_b, d.d_b).unwrap()).unwrap())
            .unwrap()
            .tanh()
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for (a, b) in out[0].iter().zip(&cand[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_matches_hand_loop() {
        let d = BeliefDims { d_b: 4, d_z: 2, ..dims() };
        let ps = store(d, 21);
        let w = |n: &str| ps.get(n).unwrap().to_dtype(DType::F64).unwrap();
        let (wx, bx) = (w("bel.gru.x.w").to_vec2::<f64>().unwrap(), w("bel.gru.x.b").to_vec1::<f64>().unwrap());
        let (wh, bh) = (w("bel.gru.h.w").to_vec2::<f64>().unwrap(), w("bel.gru.h.b").to_vec1::<f64>().unwrap());
        let h = [0.3, -0.8, 0.1, 0.5];
        let e = [1.2, -0.4, 0.0, 0.7];
        let z = [-0.2, 0.9];
        let x: Vec<f64> = e.iter().chain(&z).copied().collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut want = [0.0; 4];
        for j in 0..4 {
            let gx = |g: usize| bx[g * 4 + j] + (0..6).map(|i| x[i] * wx[i][g * 4 + j]).sum::<f64>();
            let gh = |g: usize| bh[g * 4 + j] + (0..4).map(|i| h[i] * wh[i][g * 4 + j]).sum::<f64>();
            let r = sig(gx(0) + gh(0));
            let u = sig(gx(1) + gh(1));
            let cand = (gx(2) + r * gh(2)).tanh();
            want[j] = (1.0 - u) * h[j] + u * cand;
        }
        let t = |v: &[f64]| Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap();
        let got = gru_update(&ps, &t(&h), &t(&e), &t(&z)).unwrap().to_vec2::<f64>().unwrap();
        for j in 0..4 {
            assert!((got[0][j] - want[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for (mq, sq, mp, sp) in [(1.0, 1.0, 0.0, 1.0), (0.0, 2.0, 0.0, 1.0), (-0.5, 0.7, 0.3, 1.4)] {
            let q = gauss(&[mq], &[sq]);
            let p = gauss(&[mp], &[sp]);
            let exact = nn::scalar(&gaussian_kl(&q, &p).unwrap().sum_all().unwrap()).unwrap();
            let n = 200_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let x = mq + sq * <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(&rand_distr::StandardNormal, &mut r);
                let lq = -((x - mq) / sq).powi(2) / 2.0 - sq.ln();
                let lp = -((x - mp) / sp).powi(2) / 2.0 - sp.ln();
                acc += lq - lp;
            }
            assert!((acc / n as f64 - exact).abs() < 0.02, "{exact}");
        }
    }

    #[test]
    fn too_short_episode_rejected() {
        let d = dims();
        let ps = store(d, 6);
        let batch = toy_batch(d, &[12, d.k + 5], 1);
        let eps = Tensor::zeros((12, 2, d.d_z), DType::F64, &Device::Cpu).unwrap();
        let w = LossWeights { lambda5: 0.5, beta: 0.1, w_inv: 0.1 };
        assert!(matches!(belief_rollout_train(&ps, d, &batch, w, &eps), Err(Error::Precondition(_))));
    }

    #[test]
    fn dropped_frame_keeps_valid_belief() {
        let d = dims();
        let ps = store(d, 8);
        let mut tr = BeliefTracker::new(&ps, d, LatentMode::Prior).unwrap();
        let tri = triple(&d, 0.4);
        tr.step(&ps, tri.clone()).unwrap();
        let b = tr.step(&ps, tri).unwrap().to_vec();
        assert_eq!(b.len(), d.d_b);
        assert!(b.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoder_shapes_and_errors() {
        let d = dims();
        let ps = store(d, 5);
        let b = Tensor::zeros((3, d.d_b), DType::F64, &Device::Cpu).unwrap();
        let z = Tensor::zeros((3, d.d_z), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(decode_future(&ps, &b, &z, 1).unwrap().dims(), [3, d.d_f]);
        assert_eq!(decode_future(&ps, &b, &z, 5).unwrap().dims(), [3, d.d_f]);
        assert!(matches!(decode_future(&ps, &b, &z, 2), Err(Error::Precondition(_))));
        let z2 = Tensor::ones((3, d.d_z), DType::F64, &Device::Cpu).unwrap();
        let a = nn::to_vec1(&decode_future(&ps, &b, &z, 1).unwrap()).unwrap();
        let c = nn::to_vec1(&decode_future(&ps, &b, &z2, 1).unwrap()).unwrap();
        assert!(a.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f32>() > 0.0);
        assert_eq!(inverse_dynamics(&ps, &b, &b).unwrap().dims(), [3, ACTION_DIM]);
    }

    fn toy_batch(d: BeliefDims, lengths: &[usize], seed: u64) -> SequenceBatch {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut f = vec![];
        let mut tg = vec![];
        let mut acts = vec![];
        let mut props = vec![];
        for &l in lengths {
            f.push((0..l * d.d_f).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f32>>());
            tg.push((0..l * d.d_f).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f32>>());
            acts.push((0..l).map(|_| [r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), r.random_range(0.0..1.0)]).collect::<Vec<_>>());
            props.push((0..l).map(|_| [r.random_range(0.0..1.0); 6]).collect::<Vec<_>>());
        }
        let fs: Vec<&[f32]> = f.iter().map(Vec::as_slice).collect();
        let ts: Vec<&[f32]> = tg.iter().map(Vec::as_slice).collect();
        let as_: Vec<&[[f32; 3]]> = acts.iter().map(Vec::as_slice).collect();
        let ps_: Vec<&[[f32; 6]]> = props.iter().map(Vec::as_slice).collect();
        SequenceBatch::build(d, &fs, &ts, &as_, &ps_, DType::F64).unwrap()
    }

    #[test]
    fn switched_off_terms_leave_one_step_loss() {
        let d = dims();
        let ps = store(d, 6);
        let batch = toy_batch(d, &[12, 9], 1);
        let eps = Tensor::zeros((12, 2, d.d_z), DType::F64, &Device::Cpu).unwrap();
        let w = LossWeights { lambda5: 0.0, beta: 0.0, w_inv: 0.0 };
        let (loss, diag) = belief_rollout_train(&ps, d, &batch, w, &eps).unwrap();
        let per_episode = diag.one_step * (11 + 8) as f64 / 2.0;
        assert!((nn::scalar(&loss).unwrap() - per_episode).abs() < 1e-9);
        let full = LossWeights { lambda5: 0.5, beta: 0.1, w_inv: 0.1 };
        let (loss, diag) = belief_rollout_train(&ps, d, &batch, full, &eps).unwrap();
        let l = nn::scalar(&loss).unwrap();
        assert!(l.is_finite() && l >= 0.0 && diag.kl >= 0.0);
    }

    #[test]
    fn precomputed_and_generic_paths_agree() {
        let d = dims();
        let ps = store(d, 7);
        let batch = toy_batch(d, &[7, 5], 2);
        let un = unroll(&ps, d, &batch, &ZChoice::PosteriorMean).unwrap();
        // replay step by step through the public single-step path
        let mut b = initial_belief(&ps, d, 1).unwrap();
        let raw = batch.raw.get(0).unwrap().to_vec2::<f64>().unwrap();
        for t in 0..7usize {
            let lo = t.saturating_sub(d.k - 1);
            let w: Vec<Triple> = (lo..=t)
                .map(|tau| {
                    let r = &raw[tau];
                    let prev = if tau == 0 { [0.0; 3] } else {
                        let a = &batch.actions.get(0).unwrap().get(tau - 1).unwrap().to_vec1::<f64>().unwrap();
                        [(a[0] * 0.05) as f32, (a[1] * 0.05) as f32, ((a[2] + 1.0) / 2.0) as f32]
                    };
                    let p = &r[d.d_f + 3..];
                    Triple {
                        f: r[..d.d_f].iter().map(|&v| v as f32).collect(),
                        prev_action: prev,
                        proprio: [
                            (p[0] / 2.0 + 0.5) as f32,
                            (p[1] / 2.0 + 0.5) as f32,
                            (p[2] * 0.05) as f32,
                            (p[3] * 0.05) as f32,
                            ((p[4] + 1.0) / 2.0) as f32,
                            ((p[5] + 1.0) / 2.0) as f32,
                        ],
                    }
                })
                .collect();
            let (next, _, _) = belief_infer_step(&ps, d, &b, &[&w], LatentMode::Posterior).unwrap();
            b = next;
            let want = un.beliefs.get(t).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
            let got = b.get(0).unwrap().to_vec1::<f64>().unwrap();
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5, "step {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn tracker_state_size_is_constant() {
        let d = dims();
        let ps = store(d, 8);
        let mut tr = BeliefTracker::new(&ps, d, LatentMode::Posterior).unwrap();
        let mut again = tr.clone();
        tr.step(&ps, triple(&d, 0.0)).unwrap();
        let first = tr.retained_floats();
        for i in 1..1000 {
            tr.step(&ps, triple(&d, (i % 7) as f32 * 0.1)).unwrap();
        }
        assert_eq!(tr.retained_floats(), first);
        assert_eq!(first, d.retained_floats());
        assert!(tr.window_len() <= d.k);
        // deterministic mean latent
        let mut tr2 = BeliefTracker::new(&ps, d, LatentMode::Posterior).unwrap();
        for i in 0..20 {
            tr2.step(&ps, triple(&d, i as f32 * 0.05)).unwrap();
            again.step(&ps, triple(&d, i as f32 * 0.05)).unwrap();
        }
        assert_eq!(tr2.belief(), again.belief());
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let d = dims();
        let ps = store(d, 11);
        let batch = toy_batch(d, &[12, 10], 3);
        let eps = Tensor::randn(0f64, 1.0, (12, 2, d.d_z), &Device::Cpu).unwrap();
        let w = LossWeights { lambda5: 0.5, beta: 0.1, w_inv: 0.1 };
        let f = |p: &ParamStore| Ok(belief_rollout_train(p, d, &batch, w, &eps)?.0);
        for name in ["bel.b0", "bel.pad", "bel.gru.h.w", "bel.post.l0.w", "bel.prior.l1.b", "bel.blk0.kv.w", "bel.dec5.l1.w", "bel.inv.l0.w"] {
            for (a, n) in nn::finite_difference_check(&ps, name, &[0, 3], 1e-6, &f).unwrap() {
                assert!(nn::relative_error(a, n, 1e-3) < 1e-4, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn kl_schedule_warms_up_then_plateaus() {
        let s = KlSchedule { start: 1e-3, end: 0.1, warmup_frac: 0.3, total: 1000 };
        assert_eq!(s.beta(0), 1e-3);
        assert!((s.beta(150) - (1e-3 + 0.099 * 0.5)).abs() < 1e-12);
        assert_eq!(s.beta(300), 0.1);
        assert_eq!(s.beta(999), 0.1);
        let mut prev = 0.0;
        for i in 0..1000 {
            assert!(s.beta(i) >= prev);
            prev = s.beta(i);
        }
    }
}
