//! Diffusion action-chunk policy.
//!
//! A small DiT denoises `H × A` action chunks. Conditioning `[b, I, s, t]`
//! drives adaptive layer-norm shift/scale/gate modulations, zero-initialised
//! so that every block starts as the identity and the output starts at zero.

mod agent;

pub use agent::{
    receding_horizon_execute, ControlConfig, EpisodeRunner, PolicyStack, RolloutLog,
};

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, Init, ParamStore};
use crate::simenv::{ACTION_DIM, PROPRIO_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub d_f: usize,
    pub d_s: usize,
    pub d_b: usize,
    pub d_i: usize,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub horizon: usize,
    /// Whether the belief enters the conditioning vector.
    pub use_belief: bool,
}

impl PolicyDims {
    pub fn from_config(cfg: &RunConfig, use_belief: bool) -> Self {
        Self {
            d_f: cfg.d_f,
            d_s: cfg.d_s,
            d_b: cfg.d_b,
            d_i: cfg.d_i,
            d: cfg.d_policy,
            blocks: cfg.policy_blocks,
            heads: cfg.policy_heads,
            hidden: cfg.d_policy * cfg.hidden_mult,
            horizon: cfg.chunk,
            use_belief,
        }
    }

    pub fn cond_dim(&self) -> usize {
        (if self.use_belief { self.d_b } else { 0 }) + self.d_i + self.d_s + self.d
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * ACTION_DIM
    }
}

pub fn init_policy<R: Rng>(ps: &mut ParamStore, dims: PolicyDims, rng: &mut R) -> Result<()> {
    let d = dims.d;
    nn::init_linear(ps, "pol.fuse", dims.d_f + PROPRIO_DIM, dims.d_s, rng)?;
    nn::init_mlp(ps, "pol.cond", dims.cond_dim(), dims.hidden, d, rng)?;
    nn::init_linear(ps, "pol.in", ACTION_DIM, d, rng)?;
    ps.create("pol.pos", &[dims.horizon, d], Init::Normal(0.1), rng)?;
    let bd = BlockDims {
        d,
        heads: dims.heads,
        hidden: dims.hidden,
    };
    for i in 0..dims.blocks {
        let name = format!("pol.blk{i}");
        nn::init_block(ps, &name, bd, rng)?;
        nn::init_linear_zero(ps, &format!("{name}.mod"), d, 6 * d, rng)?;
    }
    nn::init_linear_zero(ps, "pol.final.mod", d, 2 * d, rng)?;
    nn::init_linear_zero(ps, "pol.out", d, ACTION_DIM, rng)
}

/// `s_t = W [f_t, proprio_t] + c` from the current frame only. `proprio` is
/// the rescaled feature tensor `[B, 6]`.
pub fn fuse_state(ps: &ParamStore, f: &Tensor, proprio: &Tensor) -> Result<Tensor> {
    nn::linear(ps, "pol.fuse", &Tensor::cat(&[f, proprio], D::Minus1)?)
}

/// Per-example conditioning inputs, each `[B, ·]`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub belief: Option<Tensor>,
    pub intent: Tensor,
    pub state: Tensor,
}

impl Conditioning {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.intent.dim(0)?)
    }
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(nn::layer_norm(x)?
        .broadcast_mul(&(scale + 1.0)?)?
        .broadcast_add(shift)?)
}

/// `ε̂(x_s, s | b, I, s_state)`, same shape as `x: [B, H, A]`.
pub fn denoise(
    ps: &ParamStore,
    dims: PolicyDims,
    x: &Tensor,
    steps: &[usize],
    cond: &Conditioning,
) -> Result<Tensor> {
    let (b, h, a) = x.dims3()?;
    if h != dims.horizon || a != ACTION_DIM || steps.len() != b {
        return Err(Error::Shape(format!(
            "denoiser input {:?} with {} steps",
            x.dims(),
            steps.len()
        )));
    }
    let temb = nn::timestep_embedding(steps, dims.d, ps.dtype())?;
    let mut parts = Vec::with_capacity(4);
    match (&cond.belief, dims.use_belief) {
        (Some(bel), true) => parts.push(bel.clone()),
        (None, false) => {}
        (None, true) => return Err(Error::Precondition("policy expects a belief input".into())),
        (Some(_), false) => {
            return Err(Error::Usage("belief passed to a policy built without belief conditioning".into()))
        }
    }
    parts.extend([cond.intent.clone(), cond.state.clone(), temb]);
    let c = nn::silu(&nn::mlp(ps, "pol.cond", &Tensor::cat(&parts, D::Minus1)?)?)?;

    let d = dims.d;
    let mut hx = nn::linear(ps, "pol.in", x)?.broadcast_add(&ps.get("pol.pos")?)?;
    for i in 0..dims.blocks {
        let name = format!("pol.blk{i}");
        let m = nn::linear(ps, &format!("{name}.mod"), &c)?.unsqueeze(1)?;
        let part = |j: usize| m.narrow(2, j * d, d);
        let hn = modulate(&hx, &part(0)?, &part(1)?)?;
        let att = nn::self_attention(ps, &name, &hn, dims.heads)?;
        hx = (&hx + att.broadcast_mul(&part(2)?)?)?;
        let hn = modulate(&hx, &part(3)?, &part(4)?)?;
        let ff = nn::mlp(ps, &format!("{name}.ff"), &hn)?;
        hx = (&hx + ff.broadcast_mul(&part(5)?)?)?;
    }
    let m = nn::linear(ps, "pol.final.mod", &c)?.unsqueeze(1)?;
    let out = modulate(&hx, &m.narrow(2, 0, d)?, &m.narrow(2, d, d)?)?;
    nn::linear(ps, "pol.out", &out)
}

/// Linear DDPM β schedule with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(start > 0.0 && end < 1.0 && (start < end || steps == 1)) {
            return Err(Error::Config(format!(
                "β schedule {start}..{end} must satisfy 0 < start < end < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = vec![1.0];
        for b in &betas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Endpoints are given for a 1000-step chain and rescaled by `1000 / S`,
    /// keeping the total noise comparable when `S` is small.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let k = 1000.0 / cfg.diffusion_steps as f64;
        Self::linear(cfg.diffusion_steps, cfg.diff_beta_start * k, cfg.diff_beta_end * k)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::Precondition(format!(
                "noise step {s} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s]
    }

    /// Variance of `q(x_{s-1} | x_s, x_0)`.
    pub fn posterior_variance(&self, s: usize) -> f64 {
        self.beta(s) * (1.0 - self.alpha_bar[s - 1]) / (1.0 - self.alpha_bar[s])
    }
}

/// `a_s = √ᾱ_s a_0 + √(1−ᾱ_s) ε`.
pub fn forward_noise(a0: &Tensor, s: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(s)?;
    let ab = sched.alpha_bar(s);
    Ok(((a0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Row-wise [`forward_noise`] with one step per leading index.
pub fn forward_noise_batch(
    a0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let b = a0.dim(0)?;
    if steps.len() != b {
        return Err(Error::Shape(format!("{} steps for batch of {b}", steps.len())));
    }
    let mut sa = Vec::with_capacity(b);
    let mut sn = Vec::with_capacity(b);
    for &s in steps {
        sched.check(s)?;
        sa.push(sched.alpha_bar(s).sqrt());
        sn.push((1.0 - sched.alpha_bar(s)).sqrt());
    }
    let mut shape = vec![1usize; a0.rank()];
    shape[0] = b;
    let sa = nn::from_f64(sa, &shape, a0.dtype())?;
    let sn = nn::from_f64(sn, &shape, a0.dtype())?;
    Ok((a0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?)
}

/// Per-example squared error summed over the chunk, averaged over the batch.
pub fn epsilon_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let b = eps.dim(0)? as f64;
    Ok(((eps_hat - eps)?.sqr()?.sum_all()? / b)?)
}

/// ε-prediction objective for normalised chunks `a0: [B, H, A]`.
pub fn diffusion_loss(
    ps: &ParamStore,
    dims: PolicyDims,
    sched: &NoiseSchedule,
    a0: &Tensor,
    cond: &Conditioning,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let xs = forward_noise_batch(a0, steps, eps, sched)?;
    epsilon_loss(&denoise(ps, dims, &xs, steps, cond)?, eps)
}

/// Uniform steps and unit noise for one training batch.
pub fn draw_noise<R: Rng>(
    sched: &NoiseSchedule,
    dims: PolicyDims,
    batch: usize,
    dtype: DType,
    rng: &mut R,
) -> Result<(Vec<usize>, Tensor)> {
    let steps = (0..batch).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = nn::gaussian(&[batch, dims.horizon, ACTION_DIM], dtype, rng)?;
    Ok((steps, eps))
}

/// Previous chunk advanced by `stride` rows, the last row repeated to fill.
pub fn shift_chunk(prev: &Tensor, stride: usize) -> Result<Tensor> {
    let h = prev.dim(1)?;
    if stride == 0 || stride > h {
        return Err(Error::Precondition(format!("stride {stride} outside 1..={h}")));
    }
    let keep = prev.narrow(1, stride, h - stride)?;
    let last = prev.narrow(1, h - 1, 1)?;
    let fill = last.broadcast_as((prev.dim(0)?, stride, prev.dim(2)?))?;
    Ok(Tensor::cat(&[&keep, &fill.contiguous()?], 1)?)
}

#[derive(Debug, Clone, Copy)]
pub struct WarmStart<'a> {
    /// Previous normalised chunk `[B, H, A]`.
    pub prev: &'a Tensor,
    pub stride: usize,
    pub s_warm: usize,
}

/// DDPM ancestral sampling. Cold starts run all `S` steps from pure noise;
/// warm starts noise the shifted previous chunk to `s_warm` and run `s_warm`
/// steps. Returns the chunk and the number of denoiser calls.
pub fn sample_chunk(
    ps: &ParamStore,
    dims: PolicyDims,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    warm: Option<WarmStart<'_>>,
    x0_clip: f64,
    seed: u64,
) -> Result<(Tensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cond.batch()?;
    let shape = [b, dims.horizon, ACTION_DIM];
    let dt = ps.dtype();
    let (mut x, start) = match warm {
        None => (nn::gaussian(&shape, dt, &mut rng)?, sched.steps()),
        Some(w) => {
            if w.s_warm == 0 || w.s_warm >= sched.steps() {
                return Err(Error::Config(format!(
                    "s_warm {} must lie in 1..{}",
                    w.s_warm,
                    sched.steps()
                )));
            }
            let base = shift_chunk(w.prev, w.stride)?;
            let eps = nn::gaussian(&shape, dt, &mut rng)?;
            (forward_noise(&base, w.s_warm, &eps, sched)?, w.s_warm)
        }
    };
    let mut calls = 0;
    for s in (1..=start).rev() {
        let eps_hat = denoise(ps, dims, &x, &vec![s; b], cond)?.detach();
        calls += 1;
        let ab = sched.alpha_bar(s);
        let ab_prev = sched.alpha_bar(s - 1);
        let beta = sched.beta(s);
        let x0 = ((&x - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-x0_clip, x0_clip)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        x = if s > 1 {
            let z = nn::gaussian(&shape, dt, &mut rng)?;
            (mean + (z * sched.posterior_variance(s).sqrt())?)?
        } else {
            mean
        };
    }
    Ok((x, calls))
}

/// Per-dimension action normalisation from dataset statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionStats {
    pub mean: [f32; ACTION_DIM],
    pub std: [f32; ACTION_DIM],
}

impl ActionStats {
    pub const STD_FLOOR: f32 = 1e-3;

    pub fn identity() -> Self {
        Self {
            mean: [0.0; ACTION_DIM],
            std: [1.0; ACTION_DIM],
        }
    }

    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a [f32; ACTION_DIM]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0f64; ACTION_DIM];
        let mut sq = [0f64; ACTION_DIM];
        for a in actions {
            n += 1;
            for j in 0..ACTION_DIM {
                sum[j] += a[j] as f64;
                sq[j] += (a[j] as f64).powi(2);
            }
        }
        if n == 0 {
            return Err(Error::Precondition("no actions to normalise".into()));
        }
        let mut out = Self::identity();
        for j in 0..ACTION_DIM {
            let m = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            out.mean[j] = m as f32;
            out.std[j] = (var.sqrt() as f32).max(Self::STD_FLOOR);
        }
        Ok(out)
    }

    pub fn normalize(&self, a: &[f32; ACTION_DIM]) -> [f32; ACTION_DIM] {
        std::array::from_fn(|j| (a[j] - self.mean[j]) / self.std[j])
    }

    pub fn denormalize(&self, a: &[f32]) -> [f32; ACTION_DIM] {
        std::array::from_fn(|j| a[j] * self.std[j] + self.mean[j])
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.mean.iter().chain(&self.std).copied().collect()
    }

    pub fn from_slice(v: &[f32]) -> Result<Self> {
        if v.len() != 2 * ACTION_DIM {
            return Err(Error::Shape(format!("action stats of length {}", v.len())));
        }
        Ok(Self {
            mean: std::array::from_fn(|j| v[j]),
            std: std::array::from_fn(|j| v[ACTION_DIM + j]),
        })
    }
}

/// Normalised target chunk `a_{t..t+H}` flattened, padded past the end of
/// the episode with its final action.
pub fn chunk_target(
    actions: &[[f32; ACTION_DIM]],
    t: usize,
    horizon: usize,
    stats: &ActionStats,
) -> Vec<f32> {
    let last = actions.len().saturating_sub(1);
    (0..horizon)
        .flat_map(|k| stats.normalize(&actions[(t + k).min(last)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use candle_core::Device;

    fn dims(use_belief: bool) -> PolicyDims {
        PolicyDims {
            d_f: 5,
            d_s: 6,
            d_b: 4,
            d_i: 3,
            d: 16,
            blocks: 2,
            heads: 2,
            hidden: 24,
            horizon: 4,
            use_belief,
        }
    }

    fn store(d: PolicyDims, dtype: DType) -> ParamStore {
        let mut ps = ParamStore::new(dtype);
        init_policy(&mut ps, d, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        ps
    }

    /// Replace the zero-initialised parameters by small random values so
    /// that every path carries gradient.
    fn scramble(ps: &ParamStore, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        for n in names {
            let v = ps.var(&n).unwrap();
            let t = (nn::gaussian(v.dims(), ps.dtype(), &mut r).unwrap() * 0.3).unwrap();
            v.set(&(v.as_tensor() + t).unwrap()).unwrap();
        }
    }

    fn cond(d: PolicyDims, b: usize, seed: u64, dtype: DType) -> Conditioning {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Conditioning {
            belief: d.use_belief.then(|| nn::gaussian(&[b, d.d_b], dtype, &mut r).unwrap()),
            intent: nn::gaussian(&[b, d.d_i], dtype, &mut r).unwrap(),
            state: nn::gaussian(&[b, d.d_s], dtype, &mut r).unwrap(),
        }
    }

    #[test]
    fn fuse_state_shape_and_sensitivity() {
        let d = dims(true);
        let ps = store(d, DType::F64);
        let f = Tensor::ones((2, d.d_f), DType::F64, &Device::Cpu).unwrap();
        let p1 = Tensor::new(&[[0.1f64, 0.2, 0.0, 0.0, -1.0, -1.0], [0.1, 0.2, 0.0, 0.0, -1.0, -1.0]], &Device::Cpu).unwrap();
        let p2 = Tensor::new(&[[0.1f64, 0.2, 0.0, 0.0, -1.0, -1.0], [0.5, 0.2, 0.0, 0.0, 1.0, -1.0]], &Device::Cpu).unwrap();
        let a = fuse_state(&ps, &f, &p1).unwrap().to_vec2::<f64>().unwrap();
        let b = fuse_state(&ps, &f, &p2).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a[0].len(), d.d_s);
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for i in 1..=100 {
            assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
            assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
            if i > 1 {
                assert!(s.beta(i) > s.beta(i - 1));
            }
        }
        assert!(NoiseSchedule::linear(10, 0.5, 1.5).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        let cfg = RunConfig::default();
        let s = NoiseSchedule::from_config(&cfg).unwrap();
        assert_eq!(s.steps(), 100);
        assert!((s.beta(1) - 1e-3).abs() < 1e-12 && (s.beta(100) - 0.2).abs() < 1e-12);
        assert!(s.alpha_bar(100) < 1e-3);
    }

    #[test]
    fn forward_noise_limits_and_range() {
        let a0 = Tensor::new(&[[1.0f64, -2.0]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[0.5f64, 0.25]], &Device::Cpu).unwrap();
        let one = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let x = forward_noise(&a0, 1, &eps, &one).unwrap().to_vec2::<f64>().unwrap();
        assert!((x[0][0] - 1.0).abs() < 1e-5 && (x[0][1] + 2.0).abs() < 1e-5);
        let full = NoiseSchedule::linear(1, 1.0 - 1e-15, 1.0 - 1e-15).unwrap();
        let x = forward_noise(&a0, 1, &eps, &full).unwrap().to_vec2::<f64>().unwrap();
        assert!((x[0][0] - 0.5).abs() < 1e-6 && (x[0][1] - 0.25).abs() < 1e-6);
        assert!(forward_noise(&a0, 0, &eps, &one).is_err());
        assert!(forward_noise(&a0, 2, &eps, &one).is_err());
    }

    #[test]
    fn forward_noise_moments() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let s = 20;
        let n = 100_000;
        let a0 = Tensor::full(0.8f64, (n, 1), &Device::Cpu).unwrap();
        let eps = Tensor::randn(0f64, 1.0, (n, 1), &Device::Cpu).unwrap();
        let x = forward_noise(&a0, s, &eps, &sched).unwrap();
        let v: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = sched.alpha_bar(s);
        let sd = (1.0 - ab).sqrt();
        assert!((mean - ab.sqrt() * 0.8).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn loss_oracles() {
        let d = dims(true);
        let ps = store(d, DType::F64);
        let sched = NoiseSchedule::linear(50, 1e-3, 0.3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let eps = nn::gaussian(&[8, d.horizon, 3], DType::F64, &mut r).unwrap();
        assert_eq!(nn::scalar(&epsilon_loss(&eps, &eps).unwrap()).unwrap(), 0.0);
        // the zero-initialised output layer makes a zero denoiser
        let b = 4000;
        let c = cond(d, b, 3, DType::F64);
        let a0 = nn::gaussian(&[b, d.horizon, 3], DType::F64, &mut r).unwrap();
        let (steps, eps) = draw_noise(&sched, d, b, DType::F64, &mut r).unwrap();
        let l = nn::scalar(&diffusion_loss(&ps, d, &sched, &a0, &c, &steps, &eps).unwrap()).unwrap();
        let ha = (d.horizon * 3) as f64;
        assert!((l - ha).abs() < 0.02 * ha, "{l} vs {ha}");
    }

    #[test]
    fn conditioning_gradients_match_finite_differences() {
        let d = dims(true);
        let ps = store(d, DType::F64);
        scramble(&ps, 4);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let c = cond(d, 3, 6, DType::F64);
        let a0 = nn::gaussian(&[3, d.horizon, 3], DType::F64, &mut r).unwrap();
        let (steps, eps) = draw_noise(&sched, d, 3, DType::F64, &mut r).unwrap();
        let f = |p: &ParamStore| diffusion_loss(p, d, &sched, &a0, &c, &steps, &eps);
        for name in ["pol.cond.l0.w", "pol.blk0.mod.w", "pol.final.mod.b", "pol.fuse.w", "pol.blk1.kv.w"] {
            for (a, n) in nn::finite_difference_check(&ps, name, &[0, 7, 11], 1e-6, &f).unwrap() {
                assert!(nn::relative_error(a, n, 1e-3) < 1e-4, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn belief_wiring_checked() {
        let with = dims(true);
        let without = dims(false);
        let ps = store(without, DType::F32);
        let x = Tensor::zeros((2, without.horizon, 3), DType::F32, &Device::Cpu).unwrap();
        let c = cond(without, 2, 1, DType::F32);
        assert!(denoise(&ps, without, &x, &[1, 2], &c).is_ok());
        let cb = cond(with, 2, 1, DType::F32);
        assert!(matches!(denoise(&ps, without, &x, &[1, 2], &cb), Err(Error::Usage(_))));
        let ps = store(with, DType::F32);
        assert!(matches!(denoise(&ps, with, &x, &[1, 2], &c), Err(Error::Precondition(_))));
        assert!(!ps.contains("pol.cond.l0.w") || ps.var("pol.cond.l0.w").unwrap().dims()[0] == with.cond_dim());
        assert_eq!(without.cond_dim() + without.d_b, with.cond_dim());
    }

    #[test]
    fn sampler_is_seeded_and_counts_steps() {
        let d = dims(true);
        let ps = store(d, DType::F32);
        scramble(&ps, 8);
        let sched = NoiseSchedule::linear(40, 1e-3, 0.3).unwrap();
        let c = cond(d, 1, 9, DType::F32);
        let (a, n) = sample_chunk(&ps, d, &sched, &c, None, 4.0, 17).unwrap();
        let (b, _) = sample_chunk(&ps, d, &sched, &c, None, 4.0, 17).unwrap();
        let (e, _) = sample_chunk(&ps, d, &sched, &c, None, 4.0, 18).unwrap();
        assert_eq!(n, 40);
        assert_eq!(a.dims(), [1, d.horizon, 3]);
        assert_eq!(nn::to_vec1(&a).unwrap(), nn::to_vec1(&b).unwrap());
        assert_ne!(nn::to_vec1(&a).unwrap(), nn::to_vec1(&e).unwrap());
        let w = WarmStart { prev: &a, stride: 2, s_warm: 12 };
        let (_, m) = sample_chunk(&ps, d, &sched, &c, Some(w), 4.0, 19).unwrap();
        assert_eq!(m, 12);
        assert!(m < n);
    }

    #[test]
    fn shift_repeats_last_row() {
        let prev = Tensor::from_vec((0..12).map(|v| v as f32).collect::<Vec<_>>(), (1, 4, 3), &Device::Cpu).unwrap();
        let s = shift_chunk(&prev, 2).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(s[0], vec![vec![6., 7., 8.], vec![9., 10., 11.], vec![9., 10., 11.], vec![9., 10., 11.]]);
        let s = shift_chunk(&prev, 4).unwrap().to_vec3::<f32>().unwrap();
        assert!(s[0].iter().all(|r| r == &vec![9., 10., 11.]));
        assert!(shift_chunk(&prev, 5).is_err());
    }

    #[test]
    fn stats_round_trip_and_targets() {
        let acts = vec![[0.01f32, -0.02, 1.0], [0.03, 0.0, 0.0], [-0.01, 0.04, 1.0]];
        let st = ActionStats::from_actions(&acts).unwrap();
        for a in &acts {
            let back = st.denormalize(&st.normalize(a));
            for j in 0..3 {
                assert!((back[j] - a[j]).abs() < 1e-6);
            }
        }
        assert_eq!(ActionStats::from_slice(&st.to_vec()).unwrap(), st);
        let t = chunk_target(&acts, 1, 4, &ActionStats::identity());
        assert_eq!(t, vec![0.03, 0.0, 0.0, -0.01, 0.04, 1.0, -0.01, 0.04, 1.0, -0.01, 0.04, 1.0]);
    }

    #[test]
    fn overfits_a_single_chunk() {
        let d = PolicyDims { horizon: 4, ..dims(true) };
        let ps = store(d, DType::F32);
        let sched = NoiseSchedule::linear(50, 2e-2, 0.4).unwrap();
        let target: Vec<f32> = vec![0.5, -0.3, 1.0, 0.2, 0.1, -1.0, -0.4, 0.6, 0.0, 0.3, -0.2, 0.8];
        let bsz = 64;
        let a0 = Tensor::from_vec(target.repeat(bsz), (bsz, d.horizon, 3), &Device::Cpu).unwrap();
        let c1 = cond(d, 1, 11, DType::F32);
        let c = Conditioning {
            belief: c1.belief.as_ref().map(|t| t.broadcast_as((bsz, d.d_b)).unwrap().contiguous().unwrap()),
            intent: c1.intent.broadcast_as((bsz, d.d_i)).unwrap().contiguous().unwrap(),
            state: c1.state.broadcast_as((bsz, d.d_s)).unwrap().contiguous().unwrap(),
        };
        let mut tr = nn::Trainer::new(&ps, 3e-3, 1.0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let iters = 5000;
        let mut recent = 0.0;
        for i in 0..iters {
            tr.set_lr(3e-3 * 0.5 * (1.0 + (std::f64::consts::PI * i as f64 / iters as f64).cos()));
            let (steps, eps) = draw_noise(&sched, d, bsz, DType::F32, &mut r).unwrap();
            let loss = diffusion_loss(&ps, d, &sched, &a0, &c, &steps, &eps).unwrap();
            let l = nn::scalar(&loss).unwrap();
            tr.step(&loss).unwrap();
            if i >= iters - 100 {
                recent += l / 100.0;
            }
        }
        assert!(recent < 1e-3, "final loss {recent}");
        let (x, _) = sample_chunk(&ps, d, &sched, &c1, None, 4.0, 3).unwrap();
        let x = nn::to_vec1(&x).unwrap();
        let worst = x.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(worst <= 0.05, "ℓ∞ {worst}");
    }

    proptest! {
        #[test]
        fn signal_to_noise_decreases(start in 1e-4f64..1e-2, span in 1e-3f64..0.5, n in 2usize..200) {
            let s = NoiseSchedule::linear(n, start, (start + span).min(0.999)).unwrap();
            let snr = |k: usize| s.alpha_bar(k) / (1.0 - s.alpha_bar(k));
            for k in 2..=n {
                prop_assert!(snr(k) < snr(k - 1));
            }
        }

        #[test]
        fn chunk_shape_is_fixed(seed in 0u64..1000) {
            let d = dims(false);
            let ps = store(d, DType::F32);
            let sched = NoiseSchedule::linear(5, 1e-2, 0.3).unwrap();
            let c = cond(d, 2, seed, DType::F32);
            let (x, _) = sample_chunk(&ps, d, &sched, &c, None, 4.0, seed).unwrap();
            prop_assert_eq!(x.dims(), &[2, d.horizon, 3]);
            let v = nn::to_vec1(&x).unwrap();
            prop_assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}
