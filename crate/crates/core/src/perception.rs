//! Frame encoder: patch tokens, learned attention pooling, a temporal
//! contrastive warm-start objective and the EMA target copy.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, Init, ParamStore};
use crate::simenv::{proprio_features, IMG_CHANNELS, IMG_LEN, IMG_SIDE, PROPRIO_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_f: usize,
    pub patch: usize,
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl EncoderDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            d_f: cfg.d_f,
            patch: cfg.patch,
            blocks: cfg.enc_blocks,
            heads: cfg.enc_heads,
            hidden: cfg.d_f * cfg.hidden_mult,
        }
    }

    pub fn n_patches(&self) -> usize {
        (IMG_SIDE / self.patch).pow(2)
    }

    /// Visual tokens plus the proprio token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * IMG_CHANNELS
    }
}

pub fn init_encoder<R: Rng>(ps: &mut ParamStore, dims: EncoderDims, rng: &mut R) -> Result<()> {
    if dims.patch == 0 || IMG_SIDE % dims.patch != 0 {
        return Err(Error::Config(format!("patch {} does not tile the image", dims.patch)));
    }
    nn::init_linear(ps, "enc.patch", dims.patch_len(), dims.d_f, rng)?;
    nn::init_linear(ps, "enc.prop", PROPRIO_DIM, dims.d_f, rng)?;
    ps.create("enc.pos", &[dims.n_tokens(), dims.d_f], Init::Normal(0.1), rng)?;
    let bd = BlockDims {
        d: dims.d_f,
        heads: dims.heads,
        hidden: dims.hidden,
    };
    for i in 0..dims.blocks {
        nn::init_block(ps, &format!("enc.blk{i}"), bd, rng)?;
    }
    ps.create("enc.dq", &[dims.d_f], Init::Normal(0.1), rng)
}

/// `[B, n_patches, patch*patch*3]` pixel values in `[0, 1]`, patches in raster order.
pub fn patchify(images: &[&[u8]], patch: usize, dtype: DType) -> Result<Tensor> {
    let per_side = IMG_SIDE / patch;
    let plen = patch * patch * IMG_CHANNELS;
    let mut out = Vec::with_capacity(images.len() * per_side * per_side * plen);
    for img in images {
        if img.len() != IMG_LEN {
            return Err(Error::Config(format!(
                "image has {} bytes, expected {IMG_LEN}",
                img.len()
            )));
        }
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..patch {
                    let row = (py * patch + y) * IMG_SIDE + px * patch;
                    let s = &img[row * IMG_CHANNELS..(row + patch) * IMG_CHANNELS];
                    out.extend(s.iter().map(|&v| f32::from(v) / 255.0));
                }
            }
        }
    }
    Ok(
        Tensor::from_vec(out, (images.len(), per_side * per_side, plen), &Device::Cpu)?
            .to_dtype(dtype)?,
    )
}

/// `[B, 6]` rescaled proprio features.
pub fn proprio_tensor(proprio: &[[f32; PROPRIO_DIM]], dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = proprio.iter().flat_map(proprio_features).collect();
    Ok(Tensor::from_vec(v, (proprio.len(), PROPRIO_DIM), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Patch tokens `[B, n_patches + 1, d_f]`: a linear projection of each raw
/// patch followed by one proprio token. No positional information is added here.
pub fn tokenize(
    ps: &ParamStore,
    dims: EncoderDims,
    images: &[&[u8]],
    proprio: &[[f32; PROPRIO_DIM]],
) -> Result<Tensor> {
    if images.len() != proprio.len() {
        return Err(Error::Config(format!(
            "{} images but {} proprio rows",
            images.len(),
            proprio.len()
        )));
    }
    let patches = patchify(images, dims.patch, ps.dtype())?;
    let visual = nn::linear(ps, "enc.patch", &patches)?;
    let prop = nn::linear(ps, "enc.prop", &proprio_tensor(proprio, ps.dtype())?)?.unsqueeze(1)?;
    Ok(Tensor::cat(&[visual, prop], 1)?)
}

/// `α = softmax(tokens · d_q)`, `f = Σ α_i t_i` for `tokens: [B, N, D]`.
/// Returns `(f [B, D], α [B, N])`.
pub fn attention_pool(tokens: &Tensor, dq: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = tokens.dims3()?;
    if dq.dims() != [d] {
        return Err(Error::Shape(format!(
            "pool query {:?} vs token width {d}",
            dq.dims()
        )));
    }
    let logits = tokens
        .reshape((b * n, d))?
        .matmul(&dq.reshape((d, 1))?)?
        .reshape((b, n))?;
    let alpha = nn::softmax_last(&logits)?;
    let f = alpha.unsqueeze(1)?.matmul(tokens)?.squeeze(1)?;
    Ok((f, alpha))
}

/// Frame summaries `[B, d_f]` and pooling weights `[B, N]`.
pub fn encode(
    ps: &ParamStore,
    dims: EncoderDims,
    images: &[&[u8]],
    proprio: &[[f32; PROPRIO_DIM]],
) -> Result<(Tensor, Tensor)> {
    let mut x = tokenize(ps, dims, images, proprio)?.broadcast_add(&ps.get("enc.pos")?)?;
    for i in 0..dims.blocks {
        x = nn::block(ps, &format!("enc.blk{i}"), &x, dims.heads, None)?.0;
    }
    attention_pool(&x, &ps.get("enc.dq")?)
}

/// Encode many frames in chunks without building a graph. Row-major `[n, d_f]`.
pub fn encode_frames(
    ps: &ParamStore,
    dims: EncoderDims,
    images: &[&[u8]],
    proprio: &[[f32; PROPRIO_DIM]],
    chunk: usize,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(images.len() * dims.d_f);
    for (imgs, props) in images.chunks(chunk.max(1)).zip(proprio.chunks(chunk.max(1))) {
        let (f, _) = encode(ps, dims, imgs, props)?;
        out.extend(nn::to_vec1(&f.detach())?);
    }
    Ok(out)
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Mean over rows of `logsumexp(row) − row[0]`.
fn cross_entropy_first(logits: &Tensor) -> Result<Tensor> {
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let lse = logits
        .broadcast_sub(&m)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        .broadcast_add(&m)?;
    let pos = logits.narrow(D::Minus1, 0, 1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// InfoNCE with explicit negatives. `anchors, positives: [M, D]`,
/// `negatives: [M, K, D]`; all vectors are ℓ2-normalised first.
pub fn info_nce(
    anchors: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let a = l2_normalize(anchors)?;
    let p = l2_normalize(positives)?;
    let n = l2_normalize(negatives)?;
    let pos = (&a * &p)?.sum_keepdim(D::Minus1)?;
    let neg = n.matmul(&a.unsqueeze(2)?)?.squeeze(2)?;
    let logits = (Tensor::cat(&[pos, neg], 1)? / tau)?;
    cross_entropy_first(&logits)
}

/// InfoNCE where every other row's positive serves as a negative.
pub fn info_nce_in_batch(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<Tensor> {
    let m = anchors.dim(0)?;
    if m < 2 {
        return Err(Error::Precondition("in-batch InfoNCE needs at least two pairs".into()));
    }
    let a = l2_normalize(anchors)?;
    let p = l2_normalize(positives)?;
    let sim = (a.matmul(&p.t()?)? / tau)?;
    // move each row's diagonal entry to column 0
    let idx: Vec<u32> = (0..m)
        .flat_map(|i| std::iter::once(i as u32).chain((0..m as u32).filter(move |&j| j != i as u32)))
        .collect();
    let idx = Tensor::from_vec(idx, (m, m), &Device::Cpu)?;
    cross_entropy_first(&sim.gather(&idx, 1)?)
}

/// Draw an anchor time and a positive offset `δ ∈ [1, δ_max]` for a sequence of length `len`.
pub fn sample_pair<R: Rng>(len: usize, delta_max: usize, rng: &mut R) -> Option<(usize, usize)> {
    if len < 2 || delta_max == 0 {
        return None;
    }
    let d = rng.random_range(1..=delta_max.min(len - 1));
    let t = rng.random_range(0..len - d);
    Some((t, t + d))
}

/// Temporal contrastive loss over a batch of summary sequences (`[T_i, D]`
/// each). One anchor/positive pair per usable sequence; negatives are the
/// positives of the other sequences.
pub fn contrastive_warmstart_loss<R: Rng>(
    seqs: &[Tensor],
    delta_max: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for s in seqs {
        if let Some((t, u)) = sample_pair(s.dim(0)?, delta_max, rng) {
            anchors.push(s.narrow(0, t, 1)?);
            positives.push(s.narrow(0, u, 1)?);
        }
    }
    if anchors.len() < 2 {
        return Err(Error::Precondition(
            "contrastive loss needs at least two sequences of length >= 2".into(),
        ));
    }
    info_nce_in_batch(&Tensor::cat(&anchors, 0)?, &Tensor::cat(&positives, 0)?, tau)
}

/// Fixed random embedding of 4×4-average-pooled pixels, used as prediction
/// targets when the learned frame encoder is ablated.
#[derive(Debug, Clone)]
pub struct PixelEmbedding {
    proj: Vec<f32>,
    d_out: usize,
}

const POOLED: usize = (IMG_SIDE / 4) * (IMG_SIDE / 4) * IMG_CHANNELS;

impl PixelEmbedding {
    pub fn new<R: Rng>(d_out: usize, rng: &mut R) -> Self {
        let s = (POOLED as f64).sqrt().recip();
        let proj = (0..POOLED * d_out)
            .map(|_| (s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)) as f32)
            .collect();
        Self { proj, d_out }
    }

    pub fn embed(&self, image: &[u8]) -> Vec<f32> {
        let side = IMG_SIDE / 4;
        let mut pooled = vec![0f32; POOLED];
        for y in 0..IMG_SIDE {
            for x in 0..IMG_SIDE {
                for c in 0..IMG_CHANNELS {
                    pooled[((y / 4) * side + x / 4) * IMG_CHANNELS + c] +=
                        f32::from(image[(y * IMG_SIDE + x) * IMG_CHANNELS + c]) / (255.0 * 16.0);
                }
            }
        }
        let mut out = vec![0f32; self.d_out];
        for (i, p) in pooled.iter().enumerate() {
            let row = &self.proj[i * self.d_out..(i + 1) * self.d_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += p * w;
            }
        }
        out
    }
}
