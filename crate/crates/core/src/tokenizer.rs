//! Multi-codebook hand-pose tokenizer.
//!
//! A pose is normalized, encoded to `N * code_dim` latent values and split
//! into `N` heads. Each head projects its slice to a query and scores every
//! entry of its own codebook with a scaled dot product. Inference picks the
//! highest-scoring entry per head; training uses the same hard choice in the
//! forward pass while the gradient flows through the softmax attention
//! weights (straight-through), which also reaches the codebooks. The decoder
//! maps the concatenated selected codes back to 63 joint coordinates.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SEED_KEY, STEP_KEY};
use crate::error::{Error, Result};
use crate::extraction::{HandPose, POSE_DIM};
use crate::nn::{batch_indices, device, matrix, Activation, Init, Linear, Mlp, ParamStore};
use crate::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_KIND: &str = "hand-tokenizer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub assignment: TrainingAssignment,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            num_codebooks: 8,
            codebook_size: 1024,
            code_dim: 16,
            hidden: 256,
            steps: 1500,
            batch_size: 128,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            assignment: TrainingAssignment::StraightThrough,
            cosine_decay: true,
            seed: 0,
        }
    }
}

/// How codes are mixed during training. Inference always uses the hard argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingAssignment {
    /// Hard one-hot forward, softmax-weighted gradient.
    #[default]
    StraightThrough,
    /// Softmax-weighted code mixture in both directions.
    Soft,
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 || self.codebook_size < 2 || self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("tokenizer dimensions must be positive".into()));
        }
        if self.codebook_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("codebook too large".into()));
        }
        Ok(())
    }
}

/// Per-head codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

pub struct TokenizerModel {
    config: TokenizerConfig,
    params: ParamStore,
    encoder: Mlp,
    query: Linear,
    codebooks: Tensor,
    decoder: Mlp,
    mean: Tensor,
    std: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    /// Mean per-joint error over the training corpus with hard assignment.
    pub reconstruction_error: f64,
    /// Fraction of codebook entries used by the corpus, per head.
    pub utilization: Vec<f64>,
}

struct Encoded {
    /// heads x batch x codebook
    scores: Tensor,
}

impl TokenizerModel {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let latent = config.num_codebooks * config.code_dim;
        let encoder = Mlp::new(&mut params, "encoder", &[POSE_DIM, config.hidden, latent], Activation::Gelu)?;
        let query = Linear::new(&mut params, "query", latent, latent)?;
        let codebooks = params.param(
            "codebooks",
            &[config.num_codebooks, config.codebook_size, config.code_dim],
            Init::Normal { std: 1.0 },
        )?;
        let decoder = Mlp::new(&mut params, "decoder", &[latent, config.hidden, POSE_DIM], Activation::Gelu)?;
        Ok(Self {
            config,
            params,
            encoder,
            query,
            codebooks,
            decoder,
            mean: Tensor::zeros(POSE_DIM, DType::F32, &device())?,
            std: Tensor::ones(POSE_DIM, DType::F32, &device())?,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn num_codebooks(&self) -> usize {
        self.config.num_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    fn normalize(&self, poses: &[&HandPose]) -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = poses
            .iter()
            .map(|p| p.to_flat().into_iter().map(|v| v as f32).collect())
            .collect();
        Ok(matrix(&rows, POSE_DIM)?
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.std)?)
    }

    fn encode(&self, x: &Tensor) -> Result<Encoded> {
        let (b, _) = x.dims2()?;
        let (n, dc) = (self.config.num_codebooks, self.config.code_dim);
        let q = self
            .query
            .forward(&self.encoder.forward(x)?)?
            .reshape((b, n, dc))?
            .transpose(0, 1)?
            .contiguous()?;
        let keys = self.codebooks.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&keys)? / (dc as f64).sqrt())?;
        Ok(Encoded { scores })
    }

    /// Straight-through code mixture: hard selection forward, softmax gradient backward.
    fn quantize(&self, scores: &Tensor) -> Result<Tensor> {
        let (n, b, c) = scores.dims3()?;
        let soft = candle_nn::ops::softmax(scores, D::Minus1)?;
        if self.config.assignment == TrainingAssignment::Soft {
            return self.mix(&soft);
        }
        let idx = scores.argmax_keepdim(D::Minus1)?;
        let hard = Tensor::arange(0u32, c as u32, &device())?
            .reshape((1, 1, c))?
            .broadcast_as((n, b, c))?
            .eq(&idx.broadcast_as((n, b, c))?)?
            .to_dtype(DType::F32)?;
        let weights = ((hard + &soft)? - soft.detach())?;
        self.mix(&weights)
    }

    /// `weights`: heads x batch x codebook -> batch x (heads * code_dim).
    fn mix(&self, weights: &Tensor) -> Result<Tensor> {
        let (n, b, _) = weights.dims3()?;
        Ok(weights
            .matmul(&self.codebooks)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((b, n * self.config.code_dim))?)
    }

    fn hard_tokens(scores: &Tensor) -> Result<Vec<Vec<u32>>> {
        // heads x batch -> batch x heads
        let idx = scores.argmax(D::Minus1)?.t()?.contiguous()?.to_vec2::<u32>()?;
        Ok(idx)
    }

    pub fn tokenize_batch(&self, poses: &[&HandPose]) -> Result<Vec<TokenSequence>> {
        if poses.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.normalize(poses)?;
        let enc = self.encode(&x)?;
        Ok(Self::hard_tokens(&enc.scores)?
            .into_iter()
            .map(TokenSequence)
            .collect())
    }

    pub fn tokenize(&self, pose: &HandPose) -> Result<TokenSequence> {
        if pose.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(self.tokenize_batch(&[pose])?.remove(0))
    }

    pub fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.0.len() != self.config.num_codebooks {
            return Err(Error::shape(self.config.num_codebooks, tokens.0.len()));
        }
        if let Some(&t) = tokens
            .0
            .iter()
            .find(|&&t| t as usize >= self.config.codebook_size)
        {
            return Err(Error::TokenOutOfRange {
                token: t,
                codebook_size: self.config.codebook_size,
            });
        }
        Ok(())
    }

    pub fn detokenize_batch(&self, tokens: &[TokenSequence]) -> Result<Vec<HandPose>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        for t in tokens {
            self.check_tokens(t)?;
        }
        let (n, c) = (self.config.num_codebooks, self.config.codebook_size);
        let b = tokens.len();
        let mut onehot = vec![0f32; n * b * c];
        for (bi, t) in tokens.iter().enumerate() {
            for (h, &tok) in t.0.iter().enumerate() {
                onehot[(h * b + bi) * c + tok as usize] = 1.0;
            }
        }
        let w = Tensor::from_vec(onehot, (n, b, c), &device())?;
        let out = self.decoder.forward(&self.mix(&w)?)?;
        self.denormalize(&out)
    }

    fn denormalize(&self, out: &Tensor) -> Result<Vec<HandPose>> {
        out.broadcast_mul(&self.std)?
            .broadcast_add(&self.mean)?
            .to_vec2::<f32>()?
            .into_iter()
            .map(|row| HandPose::from_flat(&row.into_iter().map(f64::from).collect::<Vec<_>>()))
            .collect()
    }

    pub fn detokenize(&self, tokens: &TokenSequence) -> Result<HandPose> {
        Ok(self.detokenize_batch(std::slice::from_ref(tokens))?.remove(0))
    }

    /// Reconstruction through hard tokens, batched.
    pub fn reconstruct(&self, poses: &[HandPose]) -> Result<Vec<HandPose>> {
        let mut out = Vec::with_capacity(poses.len());
        for chunk in poses.chunks(1024) {
            let refs: Vec<&HandPose> = chunk.iter().collect();
            let tokens = self.tokenize_batch(&refs)?;
            out.extend(self.detokenize_batch(&tokens)?);
        }
        Ok(out)
    }

    /// Raw per-head assignment scores (heads x codebook) for one pose.
    pub fn scores(&self, pose: &HandPose) -> Result<Vec<Vec<f32>>> {
        let x = self.normalize(&[pose])?;
        Ok(self.encode(&x)?.scores.squeeze(1)?.to_vec2::<f32>()?)
    }

    /// Codebook vectors of head `h`.
    pub fn codebook(&self, h: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self.codebooks.get(h)?.to_vec2::<f32>()?)
    }

    /// Pose -> per-head query vectors, exposed for independent verification.
    pub fn queries(&self, pose: &HandPose) -> Result<Vec<Vec<f32>>> {
        let x = self.normalize(&[pose])?;
        let (n, dc) = (self.config.num_codebooks, self.config.code_dim);
        Ok(self
            .query
            .forward(&self.encoder.forward(&x)?)?
            .reshape((n, dc))?
            .to_vec2::<f32>()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(CHECKPOINT_KIND)
            .with_config(&self.config)?
            .with_meta(SEED_KEY, self.config.seed)
            .with_meta(
                "shapes",
                format!(
                    "codebooks={}x{}x{}",
                    self.config.num_codebooks, self.config.codebook_size, self.config.code_dim
                ),
            )
            .extend(self.params.named_tensors())
            .extend([
                ("norm.mean".to_string(), self.mean.clone()),
                ("norm.std".to_string(), self.std.clone()),
            ]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TokenizerConfig = ck.config()?;
        let mut model = Self::new(config)?;
        model.params.load(&ck.tensors, "")?;
        let get = |k: &str| {
            ck.tensors
                .get(k)
                .cloned()
                .ok_or_else(|| Error::shape(k, "missing"))
        };
        model.mean = get("norm.mean")?;
        model.std = get("norm.std")?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, CHECKPOINT_KIND)?)
    }
}

/// Trains a tokenizer on `corpus` by minimizing mean squared reconstruction
/// error of the normalized coordinates.
pub fn train_tokenizer(corpus: &[HandPose], config: &TokenizerConfig) -> Result<(TokenizerModel, TrainingReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.len() < config.codebook_size {
        log::warn!(
            "tokenizer corpus has {} poses, fewer than the codebook size {}",
            corpus.len(),
            config.codebook_size
        );
    }
    let mut model = TokenizerModel::new(config.clone())?;

    let flat: Vec<Vec<f64>> = corpus.iter().map(|p| p.to_flat()).collect();
    let n = flat.len() as f64;
    let mut mean = vec![0f64; POSE_DIM];
    let mut var = vec![0f64; POSE_DIM];
    for row in &flat {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    for row in &flat {
        for d in 0..POSE_DIM {
            var[d] += (row[d] - mean[d]).powi(2) / n;
        }
    }
    // A single shared scale keeps relative joint geometry intact.
    let scale = (var.iter().sum::<f64>() / POSE_DIM as f64).sqrt().max(1e-6);
    model.mean = Tensor::from_vec(mean.iter().map(|v| *v as f32).collect::<Vec<_>>(), POSE_DIM, &device())?;
    model.std = Tensor::from_vec(vec![scale as f32; POSE_DIM], POSE_DIM, &device())?;

    let all_refs: Vec<&HandPose> = corpus.iter().collect();
    let data = model.normalize(&all_refs)?;
    let mut opt = AdamW::new(model.params.select(&[""]), config.optimizer)?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.cosine_decay {
            let progress = step as f64 / config.steps as f64;
            opt.set_lr(config.optimizer.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        }
        let idx = batch_indices(corpus.len(), config.batch_size, config.seed, step as u64);
        let idx_t = Tensor::from_vec(idx.iter().map(|i| *i as u32).collect::<Vec<_>>(), idx.len(), &device())?;
        let x = data.index_select(&idx_t, 0)?;
        let enc = model.encode(&x)?;
        let recon = model.decoder.forward(&model.quantize(&enc.scores)?)?;
        let loss = (recon - &x)?.sqr()?.mean_all()?;
        losses.push(loss.to_scalar::<f32>()? as f64);
        opt.backward_step(&loss)?;
        if step % 500 == 0 {
            log::debug!("tokenizer step {step}: loss {:.5}", losses[step]);
        }
    }

    let recon = model.reconstruct(corpus)?;
    let reconstruction_error =
        corpus.iter().zip(&recon).map(|(a, b)| a.mean_joint_error(b)).sum::<f64>() / corpus.len() as f64;
    let mut used = vec![std::collections::BTreeSet::new(); config.num_codebooks];
    for chunk in all_refs.chunks(1024) {
        for t in model.tokenize_batch(chunk)? {
            for (h, tok) in t.0.iter().enumerate() {
                used[h].insert(*tok);
            }
        }
    }
    let utilization = used
        .iter()
        .map(|s| s.len() as f64 / config.codebook_size as f64)
        .collect();
    Ok((
        model,
        TrainingReport {
            losses,
            reconstruction_error,
            utilization,
        },
    ))
}

/// Checkpoint with the trained step count recorded.
pub fn save_trained(model: &TokenizerModel, steps: usize, path: &Path) -> Result<()> {
    model.to_checkpoint()?.with_meta(STEP_KEY, steps).save(path)
}
