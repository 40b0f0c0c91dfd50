//! Encoder–decoder contact/hand prior.
//!
//! The encoder maps an image to a single `d`-dimensional embedding. The
//! decoder sees nothing but that embedding: it is projected, added to a set
//! of learned query tokens (two contact tokens, then one token per hand-pose
//! codebook or a single regression token) and run through a small
//! transformer. Contact tokens emit `B_x + B_y` bin logits; hand tokens emit
//! codebook logits or 63 regressed coordinates.
//!
//! Losses are evaluated in `f64` so that analytic values and finite
//! differences can be checked tightly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SEED_KEY, STEP_KEY};
use crate::error::{Error, Result};
use crate::extraction::{HandPose, POSE_DIM};
use crate::geometry::Point2D;
use crate::manifest::{LoadedDataset, ManifestRecord};
use crate::nn::{batch_indices, device, Activation, Init, LayerNorm, Linear, Mlp, ParamStore, TransformerBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{TokenSequence, TokenizerModel};

pub const CHECKPOINT_KIND: &str = "contact-prior";
pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandHeadMode {
    Tokens,
    Regression,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Patch-embedding transformer.
    Vit,
    /// Strided convolution stack (four stride-2 3x3 layers).
    Conv,
}

/// The four loss configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoContactLoss,
    NoHandLoss,
    HandRegression,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoContactLoss,
        Ablation::NoHandLoss,
        Ablation::HandRegression,
        Ablation::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoContactLoss => "no_contact_loss",
            Ablation::NoHandLoss => "no_hand_loss",
            Ablation::HandRegression => "hand_regression",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorModelConfig {
    pub image_size: usize,
    pub encoder: EncoderKind,
    pub embedding_dim: usize,
    pub patch_size: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub conv_channels: Vec<usize>,
    pub pooling: Pooling,
    pub bins_x: usize,
    pub bins_y: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub hand_head_mode: HandHeadMode,
    pub contact_head: bool,
    pub lambda_hand: f64,
    pub num_hand_tokens: usize,
    pub codebook_size: usize,
    pub freeze_encoder: bool,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub iterations: usize,
    /// Write a checkpoint every this many iterations (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PriorModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            encoder: EncoderKind::Vit,
            embedding_dim: 128,
            patch_size: 16,
            encoder_layers: 4,
            encoder_heads: 4,
            conv_channels: vec![16, 32, 64, 64],
            pooling: Pooling::Cls,
            bins_x: 100,
            bins_y: 100,
            decoder_layers: 2,
            decoder_heads: 4,
            hand_head_mode: HandHeadMode::Tokens,
            contact_head: true,
            lambda_hand: 1.0,
            num_hand_tokens: 8,
            codebook_size: 1024,
            freeze_encoder: false,
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            iterations: 3000,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl PriorModelConfig {
    /// Single-core CPU preset: a 64-wide, 2-layer encoder at a higher
    /// learning rate, which learns the synthetic contact task within 3,000
    /// iterations (the full-size defaults barely move in that budget).
    pub fn desk_scale() -> Self {
        Self {
            embedding_dim: 64,
            encoder_layers: 2,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.bins_x < 2 || self.bins_y < 2 {
            return bad("bin counts must be at least 2");
        }
        if !self.contact_head && self.hand_head_mode == HandHeadMode::Off {
            return bad("at least one of the contact and hand heads must be enabled");
        }
        if self.embedding_dim == 0 || self.embedding_dim % self.decoder_heads.max(1) != 0 {
            return bad("embedding_dim must be a positive multiple of decoder_heads");
        }
        if self.decoder_layers == 0 || self.batch_size == 0 {
            return bad("decoder_layers and batch_size must be positive");
        }
        match self.encoder {
            EncoderKind::Vit => {
                if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                    return bad("image_size must be a multiple of patch_size");
                }
                if self.embedding_dim % self.encoder_heads.max(1) != 0 || self.encoder_heads == 0 {
                    return bad("embedding_dim must be a multiple of encoder_heads");
                }
            }
            EncoderKind::Conv => {
                if self.conv_channels.is_empty() {
                    return bad("conv_channels must not be empty");
                }
            }
        }
        if self.hand_head_mode == HandHeadMode::Tokens && (self.num_hand_tokens == 0 || self.codebook_size < 2) {
            return bad("token mode needs hand tokens and a codebook");
        }
        if !(self.lambda_hand >= 0.0) {
            return bad("lambda_hand must be non-negative");
        }
        Ok(())
    }

    /// Applies the loss switches of one ablation row.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::Full => {
                self.contact_head = true;
                self.hand_head_mode = HandHeadMode::Tokens;
            }
            Ablation::NoContactLoss => {
                self.contact_head = false;
                self.hand_head_mode = HandHeadMode::Tokens;
            }
            Ablation::NoHandLoss => {
                self.contact_head = true;
                self.hand_head_mode = HandHeadMode::Off;
            }
            Ablation::HandRegression => {
                self.contact_head = true;
                self.hand_head_mode = HandHeadMode::Regression;
            }
        }
        self
    }
}

/// `floor(x / extent * bins)`, with `x == extent` mapped to the last bin.
pub fn bin_coordinate(x: f64, extent: f64, bins: usize) -> Result<usize> {
    if !x.is_finite() || x < 0.0 || x > extent || !(extent > 0.0) || bins < 2 {
        return Err(Error::OutOfRange {
            value: x,
            lo: 0.0,
            hi: extent,
        });
    }
    Ok(((x / extent * bins as f64).floor() as usize).min(bins - 1))
}

/// Center of `bin` in pixels.
pub fn unbin_coordinate(bin: usize, extent: f64, bins: usize) -> Result<f64> {
    if bin >= bins {
        return Err(Error::OutOfRange {
            value: bin as f64,
            lo: 0.0,
            hi: bins as f64 - 1.0,
        });
    }
    Ok((bin as f64 + 0.5) / bins as f64 * extent)
}

/// Target bins `[x, y]` for a contact point.
pub fn point_bins(p: Point2D, width: f64, height: f64, bins_x: usize, bins_y: usize) -> Result<[usize; 2]> {
    Ok([bin_coordinate(p.x, width, bins_x)?, bin_coordinate(p.y, height, bins_y)?])
}

#[derive(Debug, Clone)]
pub enum HandOutput {
    /// batch x N x C logits.
    Tokens(Tensor),
    /// batch x 63 coordinates.
    Regression(Tensor),
    Off,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// batch x 2 x (B_x + B_y) logits (thumb, then index), if the contact head is enabled.
    pub contact_logits: Option<Tensor>,
    pub hand: HandOutput,
}

/// Mean over the batch of the summed softmax cross-entropies. `logits`:
/// batch x K x classes, `targets`: batch x K.
fn summed_cross_entropy(logits: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (b, k, c) = logits.dims3()?;
    if targets.len() != b || targets.iter().any(|t| t.len() != k) {
        return Err(Error::shape(format!("{b}x{k} targets"), format!("{} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().flatten().find(|&&t| t as usize >= c) {
        return Err(Error::OutOfRange {
            value: t as f64,
            lo: 0.0,
            hi: c as f64 - 1.0,
        });
    }
    let logp = candle_nn::ops::log_softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?;
    let idx = Tensor::from_vec(targets.concat(), (b, k, 1), logits.device())?;
    let picked = logp.gather(&idx, D::Minus1)?;
    Ok((picked.sum_all()?.neg()? / b as f64)?)
}

/// Contact loss: for each fingertip, cross-entropy of the x logits against the
/// x bin plus of the y logits against the y bin; summed over fingertips,
/// averaged over the batch. `targets[i] = [[x_thumb, y_thumb], [x_index, y_index]]` bins.
pub fn contact_loss(logits: &Tensor, targets: &[[[usize; 2]; 2]], bins_x: usize, bins_y: usize) -> Result<Tensor> {
    let (b, p, c) = logits.dims3()?;
    if p != 2 || c != bins_x + bins_y {
        return Err(Error::shape(format!("{b}x2x{}", bins_x + bins_y), format!("{b}x{p}x{c}")));
    }
    let x_logits = logits.narrow(2, 0, bins_x)?;
    let y_logits = logits.narrow(2, bins_x, bins_y)?;
    let xs: Vec<Vec<u32>> = targets.iter().map(|t| vec![t[0][0] as u32, t[1][0] as u32]).collect();
    let ys: Vec<Vec<u32>> = targets.iter().map(|t| vec![t[0][1] as u32, t[1][1] as u32]).collect();
    Ok((summed_cross_entropy(&x_logits, &xs)? + summed_cross_entropy(&y_logits, &ys)?)?)
}

/// Hand token loss: summed cross-entropy over the N token heads, batch mean.
pub fn hand_loss_tokens(output: &DecoderOutput, targets: &[TokenSequence]) -> Result<Tensor> {
    let HandOutput::Tokens(logits) = &output.hand else {
        return Err(Error::ModeMismatch("hand token loss needs the token head".into()));
    };
    let rows: Vec<Vec<u32>> = targets.iter().map(|t| t.0.clone()).collect();
    summed_cross_entropy(logits, &rows)
}

/// Hand regression loss: mean squared error over the 63 coordinates, batch mean.
pub fn hand_loss_regression(output: &DecoderOutput, targets: &[HandPose]) -> Result<Tensor> {
    let HandOutput::Regression(pred) = &output.hand else {
        return Err(Error::ModeMismatch("hand regression loss needs the regression head".into()));
    };
    let flat: Vec<f64> = targets.iter().flat_map(|p| p.to_flat()).collect();
    let target = Tensor::from_vec(flat, (targets.len(), POSE_DIM), pred.device())?;
    Ok((pred.to_dtype(DType::F64)? - target)?.sqr()?.mean_all()?)
}

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    pub contact_bins: Vec<[[usize; 2]; 2]>,
    pub tokens: Option<Vec<TokenSequence>>,
    pub poses: Vec<HandPose>,
}

/// Differentiable total loss plus its components as plain numbers.
pub struct LossTerms {
    pub total: Tensor,
    pub contact: f64,
    pub hand: f64,
}

/// `L = L_ct (if enabled) + lambda_hand * L_hand (if enabled)`.
pub fn total_loss(config: &PriorModelConfig, output: &DecoderOutput, targets: &BatchTargets) -> Result<LossTerms> {
    config.validate()?;
    let dev = device();
    let mut total = Tensor::new(0f64, &dev)?;
    let mut contact = 0.0;
    let mut hand = 0.0;
    if config.contact_head {
        let logits = output
            .contact_logits
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("contact head enabled but no contact logits".into()))?;
        let l = contact_loss(logits, &targets.contact_bins, config.bins_x, config.bins_y)?;
        contact = l.to_scalar::<f64>()?;
        total = (total + l)?;
    }
    let hand_term = match config.hand_head_mode {
        HandHeadMode::Off => None,
        HandHeadMode::Tokens => {
            let tokens = targets
                .tokens
                .as_ref()
                .ok_or_else(|| Error::ModeMismatch("token mode needs token targets".into()))?;
            Some(hand_loss_tokens(output, tokens)?)
        }
        HandHeadMode::Regression => Some(hand_loss_regression(output, &targets.poses)?),
    };
    if let Some(l) = hand_term {
        hand = l.to_scalar::<f64>()?;
        total = (total + (l * config.lambda_hand)?)?;
    }
    Ok(LossTerms { total, contact, hand })
}

enum Encoder {
    Vit {
        patch: Linear,
        cls: Tensor,
        pos: Tensor,
        blocks: Vec<TransformerBlock>,
        norm: LayerNorm,
    },
    Conv {
        convs: Vec<(Tensor, Tensor)>,
        head: Linear,
    },
}

struct Decoder {
    input: Linear,
    queries: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    contact: Option<Linear>,
    hand_tokens: Option<Linear>,
    hand_regression: Option<Mlp>,
}

pub struct PriorModel {
    config: PriorModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

fn conv_out(size: usize) -> usize {
    (size + 2 - 3) / 2 + 1
}

impl PriorModel {
    pub fn new(config: PriorModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed);
        let d = config.embedding_dim;
        let encoder = match config.encoder {
            EncoderKind::Vit => {
                let p = config.patch_size;
                let tokens = (config.image_size / p).pow(2);
                Encoder::Vit {
                    patch: Linear::new(&mut ps, "encoder.patch", 3 * p * p, d)?,
                    cls: ps.param("encoder.cls", &[1, 1, d], Init::Normal { std: 0.02 })?,
                    pos: ps.param("encoder.pos", &[1, tokens + 1, d], Init::Normal { std: 0.02 })?,
                    blocks: (0..config.encoder_layers)
                        .map(|i| TransformerBlock::new(&mut ps, &format!("encoder.block{i}"), d, config.encoder_heads, 2))
                        .collect::<Result<_>>()?,
                    norm: LayerNorm::new(&mut ps, "encoder.norm", d)?,
                }
            }
            EncoderKind::Conv => {
                let mut convs = Vec::new();
                let mut c_in = 3;
                let mut size = config.image_size;
                for (i, &c_out) in config.conv_channels.iter().enumerate() {
                    let w = ps.param(
                        &format!("encoder.conv{i}.weight"),
                        &[c_out, c_in, 3, 3],
                        Init::Uniform { fan_in: c_in * 9 },
                    )?;
                    let b = ps.param(&format!("encoder.conv{i}.bias"), &[1, c_out, 1, 1], Init::Zeros)?;
                    convs.push((w, b));
                    c_in = c_out;
                    size = conv_out(size);
                }
                Encoder::Conv {
                    convs,
                    head: Linear::new(&mut ps, "encoder.head", c_in * size * size, d)?,
                }
            }
        };
        let num_queries = 2 + match config.hand_head_mode {
            HandHeadMode::Tokens => config.num_hand_tokens,
            HandHeadMode::Regression => 1,
            HandHeadMode::Off => 0,
        };
        let decoder = Decoder {
            input: Linear::new(&mut ps, "decoder.input", d, d)?,
            queries: ps.param("decoder.queries", &[1, num_queries, d], Init::Normal { std: 0.02 })?,
            blocks: (0..config.decoder_layers)
                .map(|i| TransformerBlock::new(&mut ps, &format!("decoder.block{i}"), d, config.decoder_heads, 2))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut ps, "decoder.norm", d)?,
            contact: if config.contact_head {
                Some(Linear::new(&mut ps, "decoder.contact", d, config.bins_x + config.bins_y)?)
            } else {
                None
            },
            hand_tokens: if config.hand_head_mode == HandHeadMode::Tokens {
                Some(Linear::new(&mut ps, "decoder.hand_tokens", d, config.codebook_size)?)
            } else {
                None
            },
            hand_regression: if config.hand_head_mode == HandHeadMode::Regression {
                Some(Mlp::new(&mut ps, "decoder.hand_regression", &[d, d, POSE_DIM], Activation::Gelu)?)
            } else {
                None
            },
        };
        Ok(Self {
            config,
            params: ps,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &PriorModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Images -> batch x 3 x H x W tensor scaled to [-0.5, 0.5].
    pub fn image_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.width() as usize != s || img.height() as usize != s {
                return Err(Error::shape(format!("{s}x{s} image"), format!("{}x{}", img.width(), img.height())));
            }
            for c in 0..3 {
                data.extend(img.pixels().map(|p| p.0[c] as f32 / 255.0 - 0.5));
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), &device())?)
    }

    /// batch x 3 x H x W -> batch x d.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!("Bx3x{s}x{s}"), format!("{b}x{c}x{h}x{w}")));
        }
        match &self.encoder {
            Encoder::Vit {
                patch,
                cls,
                pos,
                blocks,
                norm,
            } => {
                let p = self.config.patch_size;
                let g = s / p;
                let patches = x
                    .reshape((b, 3, g, p, g, p))?
                    .permute((0, 2, 4, 1, 3, 5))?
                    .contiguous()?
                    .reshape((b, g * g, 3 * p * p))?;
                let d = self.config.embedding_dim;
                let mut t = Tensor::cat(&[&cls.broadcast_as((b, 1, d))?, &patch.forward(&patches)?], 1)?;
                t = t.broadcast_add(pos)?;
                for block in blocks {
                    t = block.forward(&t)?;
                }
                let t = norm.forward(&t)?;
                Ok(match self.config.pooling {
                    Pooling::Cls => t.narrow(1, 0, 1)?.squeeze(1)?,
                    Pooling::Mean => t.narrow(1, 1, g * g)?.mean(1)?,
                })
            }
            Encoder::Conv { convs, head } => {
                let mut t = x.clone();
                for (w, bias) in convs {
                    t = t.conv2d(w, 1, 2, 1, 1)?.broadcast_add(bias)?.relu()?;
                }
                head.forward(&t.flatten_from(1)?)
            }
        }
    }

    /// Embedding of one image.
    pub fn encode(&self, image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.encode_tensor(&self.image_tensor(&[image])?)?.squeeze(0)?.to_vec1::<f32>()?)
    }

    /// Embeddings of many images, batched, as rows.
    pub fn encode_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(self.encode_tensor(&self.image_tensor(chunk)?)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// batch x d embedding -> heads. Only the embedding is consulted.
    pub fn decode(&self, embedding: &Tensor) -> Result<DecoderOutput> {
        let (b, d) = embedding.dims2()?;
        if d != self.config.embedding_dim {
            return Err(Error::shape(self.config.embedding_dim, d));
        }
        let dec = &self.decoder;
        let q = dec.queries.dims3()?.1;
        let ctx = dec.input.forward(embedding)?.unsqueeze(1)?;
        let mut t = dec.queries.broadcast_add(&ctx)?;
        debug_assert_eq!(t.dims3()?, (b, q, d));
        for block in &dec.blocks {
            t = block.forward(&t)?;
        }
        let t = dec.norm.forward(&t)?;
        let contact_logits = dec
            .contact
            .as_ref()
            .map(|h| h.forward(&t.narrow(1, 0, 2)?))
            .transpose()?;
        let hand = match self.config.hand_head_mode {
            HandHeadMode::Off => HandOutput::Off,
            HandHeadMode::Tokens => HandOutput::Tokens(
                dec.hand_tokens
                    .as_ref()
                    .expect("token head exists in token mode")
                    .forward(&t.narrow(1, 2, self.config.num_hand_tokens)?)?,
            ),
            HandHeadMode::Regression => HandOutput::Regression(
                dec.hand_regression
                    .as_ref()
                    .expect("regression head exists in regression mode")
                    .forward(&t.narrow(1, 2, 1)?.squeeze(1)?)?,
            ),
        };
        Ok(DecoderOutput { contact_logits, hand })
    }

    pub fn decode_vec(&self, embedding: &[f32]) -> Result<DecoderOutput> {
        self.decode(&Tensor::from_slice(embedding, (1, embedding.len()), &device())?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(CHECKPOINT_KIND)
            .with_config(&self.config)?
            .with_meta(SEED_KEY, self.config.seed)
            .extend(self.params.named_tensors()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Self::new(ck.config()?)?;
        model.params.load(&ck.tensors, "")?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, CHECKPOINT_KIND)?)
    }
}

/// Argmax decoding of one sample's contact logits (2 x (B_x + B_y)) into bin-center points.
pub fn points_from_logits(logits: &[Vec<f32>], width: f64, height: f64, bins_x: usize, bins_y: usize) -> Result<[Point2D; 2]> {
    let argmax = |v: &[f32]| {
        v.iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    };
    if logits.len() != 2 || logits.iter().any(|r| r.len() != bins_x + bins_y) {
        return Err(Error::shape(format!("2x{}", bins_x + bins_y), format!("{} rows", logits.len())));
    }
    let point = |row: &[f32]| -> Result<Point2D> {
        Ok(Point2D::new(
            unbin_coordinate(argmax(&row[..bins_x]), width, bins_x)?,
            unbin_coordinate(argmax(&row[bins_x..]), height, bins_y)?,
        ))
    };
    Ok([point(&logits[0])?, point(&logits[1])?])
}

/// Argmax token per head from N x C logits.
pub fn tokens_from_logits(logits: &[Vec<f32>]) -> TokenSequence {
    TokenSequence(
        logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0u32, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i as u32, x) } else { best })
                    .0
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Thumb, then index fingertip, in pixels of the input image.
    pub contact_points: Option<[Point2D; 2]>,
    pub tokens: Option<TokenSequence>,
    pub hand_pose: Option<HandPose>,
}

/// Decodes a single-sample output into points and a pose. Token mode needs
/// the tokenizer to reconstruct the pose.
pub fn prediction_from_output(
    output: &DecoderOutput,
    config: &PriorModelConfig,
    width: f64,
    height: f64,
    tokenizer: Option<&TokenizerModel>,
) -> Result<Prediction> {
    let contact_points = output
        .contact_logits
        .as_ref()
        .map(|l| points_from_logits(&l.squeeze(0)?.to_vec2::<f32>()?, width, height, config.bins_x, config.bins_y))
        .transpose()?;
    let (tokens, hand_pose) = match &output.hand {
        HandOutput::Off => (None, None),
        HandOutput::Tokens(l) => {
            let tokens = tokens_from_logits(&l.squeeze(0)?.to_vec2::<f32>()?);
            let pose = tokenizer.map(|t| t.detokenize(&tokens)).transpose()?;
            (Some(tokens), pose)
        }
        HandOutput::Regression(p) => {
            let v: Vec<f64> = p.squeeze(0)?.to_vec1::<f32>()?.into_iter().map(f64::from).collect();
            (None, Some(HandPose::from_flat(&v)?))
        }
    };
    Ok(Prediction {
        contact_points,
        tokens,
        hand_pose,
    })
}

pub fn predict_contacts_and_pose(
    model: &PriorModel,
    image: &RgbImage,
    tokenizer: Option<&TokenizerModel>,
) -> Result<Prediction> {
    let emb = model.encode_tensor(&model.image_tensor(&[image])?)?;
    let out = model.decode(&emb)?;
    prediction_from_output(&out, &model.config, image.width() as f64, image.height() as f64, tokenizer)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(rename = "L_ct")]
    pub contact: f64,
    #[serde(rename = "L_hand")]
    pub hand: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume from a checkpoint written by a previous run.
    pub resume_from: Option<PathBuf>,
}

pub struct TrainedPrior {
    pub model: PriorModel,
    pub log: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

struct PreparedData {
    pixels: Vec<Vec<f32>>,
    targets: Vec<([[usize; 2]; 2], Option<TokenSequence>, HandPose)>,
}

fn prepare(dataset: &LoadedDataset, model: &PriorModel) -> Result<PreparedData> {
    let cfg = &model.config;
    let mut pixels = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for (rec, img) in dataset.records.iter().zip(&dataset.images) {
        let t = model.image_tensor(&[img])?;
        pixels.push(t.flatten_all()?.to_vec1::<f32>()?);
        targets.push(record_targets(rec, cfg, img.width() as f64, img.height() as f64)?);
    }
    Ok(PreparedData { pixels, targets })
}

fn record_targets(
    rec: &ManifestRecord,
    cfg: &PriorModelConfig,
    width: f64,
    height: f64,
) -> Result<([[usize; 2]; 2], Option<TokenSequence>, HandPose)> {
    let (thumb, index) = rec.contact_points();
    let bins = [
        point_bins(thumb, width, height, cfg.bins_x, cfg.bins_y)?,
        point_bins(index, width, height, cfg.bins_x, cfg.bins_y)?,
    ];
    let tokens = rec.tokens.clone().map(TokenSequence);
    if cfg.hand_head_mode == HandHeadMode::Tokens {
        let t = tokens
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch(format!("record {} has no hand tokens", rec.sample_id)))?;
        if t.0.len() != cfg.num_hand_tokens {
            return Err(Error::shape(cfg.num_hand_tokens, t.0.len()));
        }
        if let Some(&bad) = t.0.iter().find(|&&v| v as usize >= cfg.codebook_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                codebook_size: cfg.codebook_size,
            });
        }
    }
    Ok((bins, tokens, rec.hand_pose.clone()))
}

fn batch(data: &PreparedData, idx: &[usize], size: usize) -> Result<(Tensor, BatchTargets)> {
    let mut flat = Vec::with_capacity(idx.len() * 3 * size * size);
    let mut targets = BatchTargets {
        contact_bins: Vec::with_capacity(idx.len()),
        tokens: Some(Vec::with_capacity(idx.len())),
        poses: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        flat.extend_from_slice(&data.pixels[i]);
        let (bins, tokens, pose) = &data.targets[i];
        targets.contact_bins.push(*bins);
        match (tokens, targets.tokens.as_mut()) {
            (Some(t), Some(all)) => all.push(t.clone()),
            _ => targets.tokens = None,
        }
        targets.poses.push(pose.clone());
    }
    Ok((Tensor::from_vec(flat, (idx.len(), 3, size, size), &device())?, targets))
}

fn trainable(model: &PriorModel) -> Vec<(String, candle_core::Var)> {
    if model.config.freeze_encoder {
        model.params.select(&[DECODER_PREFIX])
    } else {
        model.params.select(&[ENCODER_PREFIX, DECODER_PREFIX])
    }
}

/// Trains the prior. Batches are a pure function of `(seed, step)`, so a
/// resumed run follows the same trajectory as an uninterrupted one.
pub fn train_prior(dataset: &LoadedDataset, config: &PriorModelConfig, options: &TrainOptions) -> Result<TrainedPrior> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    let (model, mut opt, start) = match &options.resume_from {
        Some(path) => {
            let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
            let saved: PriorModelConfig = ck.config()?;
            if saved != *config {
                return Err(Error::Checkpoint {
                    path: path.clone(),
                    message: "configuration differs from the checkpoint's".into(),
                });
            }
            let model = PriorModel::from_checkpoint(&ck)?;
            let mut opt = AdamW::new(trainable(&model), config.optimizer)?;
            opt.load_state(&ck.tensors)?;
            let step = ck.meta_u64(STEP_KEY).unwrap_or(opt.step_count()) as usize;
            (model, opt, step)
        }
        None => {
            let model = PriorModel::new(config.clone())?;
            let opt = AdamW::new(trainable(&model), config.optimizer)?;
            (model, opt, 0)
        }
    };
    let data = prepare(dataset, &model)?;
    let mut log = Vec::with_capacity(config.iterations.saturating_sub(start));
    let mut checkpoints = Vec::new();
    let save = |model: &PriorModel, opt: &AdamW, step: usize, name: String| -> Result<Option<PathBuf>> {
        let Some(dir) = &options.checkpoint_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        model
            .to_checkpoint()?
            .with_meta(STEP_KEY, step)
            .extend(opt.state()?)
            .save(&path)?;
        Ok(Some(path))
    };
    for step in start..config.iterations {
        let idx = batch_indices(data.pixels.len(), config.batch_size, config.seed, step as u64);
        let (x, targets) = batch(&data, &idx, config.image_size)?;
        let out = model.decode(&model.encode_tensor(&x)?)?;
        let terms = total_loss(config, &out, &targets)?;
        let record = LossRecord {
            step,
            contact: terms.contact,
            hand: terms.hand,
            total: terms.total.to_scalar::<f64>()?,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        log.push(record);
        opt.backward_step(&terms.total)?;
        if step % 100 == 0 {
            log::debug!("prior step {step}: {record:?}");
        }
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations {
            checkpoints.extend(save(&model, &opt, done, format!("prior-step{done:06}.safetensors"))?);
        }
    }
    checkpoints.extend(save(&model, &opt, config.iterations, "prior-final.safetensors".into())?);
    Ok(TrainedPrior {
        model,
        log,
        checkpoints,
    })
}

/// Mean Euclidean distance between predicted and labeled contact points
/// (both fingertips), in pixels.
pub fn mean_contact_error(model: &PriorModel, dataset: &LoadedDataset) -> Result<f64> {
    if !model.config.contact_head {
        return Err(Error::ModeMismatch("model has no contact head".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (recs, imgs) in dataset.records.chunks(64).zip(dataset.images.chunks(64)) {
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let out = model.decode(&model.encode_tensor(&model.image_tensor(&refs)?)?)?;
        let logits = out.contact_logits.expect("contact head checked above").to_dtype(DType::F32)?;
        for (i, (rec, img)) in recs.iter().zip(imgs).enumerate() {
            let rows = logits.get(i)?.to_vec2::<f32>()?;
            let pred = points_from_logits(
                &rows,
                img.width() as f64,
                img.height() as f64,
                model.config.bins_x,
                model.config.bins_y,
            )?;
            let (thumb, index) = rec.contact_points();
            total += pred[0].distance(&thumb) + pred[1].distance(&index);
            count += 2;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Mean of each logged loss component over the last `window` records.
pub fn tail_means(log: &[LossRecord], window: usize) -> BTreeMap<&'static str, f64> {
    let tail = &log[log.len().saturating_sub(window)..];
    let n = tail.len().max(1) as f64;
    let mut out = BTreeMap::new();
    out.insert("L_ct", tail.iter().map(|r| r.contact).sum::<f64>() / n);
    out.insert("L_hand", tail.iter().map(|r| r.hand).sum::<f64>() / n);
    out.insert("L_total", tail.iter().map(|r| r.total).sum::<f64>() / n);
    out
}
