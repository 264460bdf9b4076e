//! Episodic intent: a trainable single-query attention pool over the token
//! states of a frozen backbone, read once per episode from the instruction
//! and the first observation.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, Init, ParamStore};
use crate::perception::patchify;
use crate::simenv::{Observation, IMG_CHANNELS, IMG_SIDE, MAX_INSTRUCTION_LEN, PAD_TOKEN, VOCAB};

pub const BACKBONE_PREFIX: &str = "int.bb";
const BACKBONE_HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntentDims {
    pub d: usize,
    pub d_i: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub patch: usize,
}

impl IntentDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            d: cfg.d_backbone,
            d_i: cfg.d_i,
            blocks: cfg.backbone_blocks,
            hidden: cfg.d_i * cfg.hidden_mult,
            patch: cfg.patch,
        }
    }

    pub fn n_patches(&self) -> usize {
        (IMG_SIDE / self.patch).pow(2)
    }

    fn heads(&self) -> usize {
        if self.d % BACKBONE_HEADS == 0 {
            BACKBONE_HEADS
        } else {
            1
        }
    }
}

/// Frozen backbone from `backbone_seed`, plus the trainable query, key
/// projection and output MLP drawn from `rng`.
pub fn init_intent<R: rand::Rng>(
    ps: &mut ParamStore,
    dims: IntentDims,
    backbone_seed: u64,
    rng: &mut R,
) -> Result<()> {
    let mut bb = ChaCha8Rng::seed_from_u64(backbone_seed);
    let d = dims.d;
    let patch_len = dims.patch * dims.patch * IMG_CHANNELS;
    ps.create("int.bb.tok", &[VOCAB.len(), d], Init::Normal(1.0), &mut bb)?;
    ps.create("int.bb.pos", &[MAX_INSTRUCTION_LEN + dims.n_patches(), d], Init::Normal(0.5), &mut bb)?;
    nn::init_linear(ps, "int.bb.patch", patch_len, d, &mut bb)?;
    let bd = BlockDims {
        d,
        heads: dims.heads(),
        hidden: 2 * d,
    };
    for i in 0..dims.blocks {
        nn::init_block(ps, &format!("int.bb.blk{i}"), bd, &mut bb)?;
    }
    ps.freeze_prefix(BACKBONE_PREFIX);

    ps.create("int.q", &[d], Init::Normal(1.0 / (d as f64).sqrt()), rng)?;
    ps.create("int.wk", &[d, d], Init::FanIn, rng)?;
    nn::init_mlp(ps, "int.mlp", d, dims.hidden, dims.d_i, rng)
}

/// Backbone output for a batch: `x: [B, N, D]` with language rows first
/// (padded to the longest instruction) followed by the patch rows.
#[derive(Debug, Clone)]
pub struct TokenStates {
    pub x: Tensor,
    pub valid: Vec<Vec<bool>>,
}

impl TokenStates {
    /// Additive key bias `[B, 1, N]` for pooling.
    pub fn bias(&self, dtype: DType) -> Result<Tensor> {
        Ok(nn::key_mask(&self.valid, dtype)?.squeeze(1)?)
    }

    /// Rows of example `i` with padding removed, `[n_i, D]`.
    pub fn rows(&self, i: usize) -> Result<Vec<Vec<f32>>> {
        let all = nn::to_vec2(&self.x.get(i)?)?;
        Ok(all
            .into_iter()
            .zip(&self.valid[i])
            .filter(|(_, &v)| v)
            .map(|(r, _)| r)
            .collect())
    }
}

fn check_tokens(tokens: &[i32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Precondition("empty instruction".into()));
    }
    if tokens.len() > MAX_INSTRUCTION_LEN {
        return Err(Error::Precondition(format!(
            "instruction of {} tokens exceeds {MAX_INSTRUCTION_LEN}",
            tokens.len()
        )));
    }
    for &t in tokens {
        if t <= PAD_TOKEN || t as usize >= VOCAB.len() {
            return Err(Error::UnknownToken(format!("#{t}")));
        }
    }
    Ok(())
}

/// Frozen token states of `[language ; initial-frame patches]`.
pub fn build_token_states(
    ps: &ParamStore,
    dims: IntentDims,
    instructions: &[&[i32]],
    first_images: &[&[u8]],
) -> Result<TokenStates> {
    if instructions.len() != first_images.len() || instructions.is_empty() {
        return Err(Error::Shape("instructions and first frames must pair up".into()));
    }
    for t in instructions {
        check_tokens(t)?;
    }
    let b = instructions.len();
    let l = instructions.iter().map(|t| t.len()).max().unwrap_or(0);
    let np = dims.n_patches();
    let dt = ps.dtype();

    let mut ids = Vec::with_capacity(b * l);
    let mut valid = Vec::with_capacity(b);
    for t in instructions {
        let mut row = vec![true; l + np];
        for j in 0..l {
            ids.push(t.get(j).copied().unwrap_or(PAD_TOKEN) as u32);
            row[j] = j < t.len();
        }
        valid.push(row);
    }
    let ids = Tensor::from_vec(ids, b * l, &Device::Cpu)?;
    let lang = ps.get("int.bb.tok")?.index_select(&ids, 0)?.reshape((b, l, dims.d))?;
    let pos = ps.get("int.bb.pos")?;
    let lang = lang.broadcast_add(&pos.narrow(0, 0, l)?)?;
    let patches = nn::linear(ps, "int.bb.patch", &patchify(first_images, dims.patch, dt)?)?
        .broadcast_add(&pos.narrow(0, MAX_INSTRUCTION_LEN, np)?)?;
    let mut x = Tensor::cat(&[&lang, &patches], 1)?;
    let mask = nn::key_mask(&valid, dt)?;
    for i in 0..dims.blocks {
        x = nn::block(ps, &format!("int.bb.blk{i}"), &x, dims.heads(), Some(&mask))?.0;
    }
    Ok(TokenStates {
        x: nn::layer_norm(&x)?,
        valid,
    })
}

/// `α = softmax(qᵀ W_k Xᵀ / √D)`, `h = α X`. `x: [B, N, D]`, `q: [D]`,
/// `wk: [D, D]`, `bias: [B, 1, N]` additive. Returns `(h [B, D], α [B, N])`.
pub fn single_query_pool(
    x: &Tensor,
    q: &Tensor,
    wk: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (_, _, d) = x.dims3()?;
    if q.dims() != [d] || wk.dims() != [d, d] {
        return Err(Error::Shape(format!(
            "pool query {:?} / key projection {:?} against width {d}",
            q.dims(),
            wk.dims()
        )));
    }
    // qᵀ W_k x_j = x_j · (W_kᵀ q)
    let u = q.unsqueeze(0)?.matmul(wk)?.reshape((d, 1))?;
    let mut logits = (x.broadcast_matmul(&u)?.transpose(1, 2)? / (d as f64).sqrt())?;
    if let Some(m) = bias {
        logits = logits.broadcast_add(m)?;
    }
    let alpha = nn::softmax_last(&logits)?;
    let h = alpha.matmul(x)?.squeeze(1)?;
    Ok((h, alpha.squeeze(1)?))
}

/// `I = MLP(h_task)` for a batch of precomputed token states.
pub fn intent_head(ps: &ParamStore, states: &TokenStates) -> Result<(Tensor, Tensor)> {
    let bias = states.bias(ps.dtype())?;
    let (h, alpha) = single_query_pool(&states.x, &ps.get("int.q")?, &ps.get("int.wk")?, Some(&bias))?;
    Ok((nn::mlp(ps, "int.mlp", &h)?, alpha))
}

/// Per-episode intent holder. The intent is computed once at `t = 0`; a
/// further extraction is only allowed with an explicit replan.
#[derive(Debug, Clone, Default)]
pub struct EpisodeIntent {
    value: Option<Vec<f32>>,
    alpha: Vec<f32>,
    invocations: usize,
}

impl EpisodeIntent {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extract(
        &mut self,
        ps: &ParamStore,
        dims: IntentDims,
        instruction: &[i32],
        obs0: &Observation,
        replan: bool,
    ) -> Result<&[f32]> {
        if self.value.is_some() && !replan {
            return Err(Error::Usage(
                "intent already extracted for this episode; pass replan to recompute".into(),
            ));
        }
        let states = build_token_states(ps, dims, &[instruction], &[&obs0.image])?;
        let (i, alpha) = intent_head(ps, &states)?;
        self.invocations += 1;
        self.alpha = nn::to_vec1(&alpha)?;
        Ok(self.value.insert(nn::to_vec1(&i)?))
    }

    pub fn get(&self) -> Result<&[f32]> {
        self.value
            .as_deref()
            .ok_or_else(|| Error::Usage("intent requested before extraction".into()))
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    /// Pooling weights over the token rows from the last extraction.
    pub fn attention(&self) -> &[f32] {
        &self.alpha
    }

    /// SHA-256 over the intent's bit patterns.
    pub fn digest(&self) -> Result<String> {
        let v = self.get()?;
        let mut h = Sha256::new();
        for x in v {
            h.update(x.to_le_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Column-wise sum of pooled weights, for checking normalisation.
pub fn pooled_mass(alpha: &Tensor) -> Result<Vec<f64>> {
    Ok(alpha.to_dtype(DType::F64)?.sum(D::Minus1)?.to_vec1()?)
}
