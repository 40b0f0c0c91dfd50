//! Contact-prediction evaluation: Gaussian heatmaps, SIM/NSS, and a
//! conditional-VAE head trained on frozen encoder features.
//!
//! Heatmap coordinates are grid cells; cell `(x, y)` has its center at
//! `(x + 0.5, y + 0.5)`. Image points map to the grid by scaling with
//! `(W / W_img, H / H_img)`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Tensor, D};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SEED_KEY, STEP_KEY};
use crate::error::{Error, Result};
use crate::geometry::Point2D;
use crate::manifest::LoadedDataset;
use crate::nn::{batch_indices, device, matrix, Activation, Mlp, ParamStore};
use crate::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_KIND: &str = "cvae-contact-head";
pub const DEFAULT_SIGMA: f64 = 3.0;
pub const GRID: usize = 32;

/// Non-negative values on an `H x W` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Zeroes cells below `fraction * max`.
    pub fn truncated(&self, fraction: f64) -> Self {
        let cut = fraction * self.max();
        Self {
            values: self.values.iter().map(|&v| if v < cut { 0.0 } else { v }).collect(),
            ..self.clone()
        }
    }

    fn check_same_shape(&self, other: &Heatmap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    /// Grayscale rendering scaled by the maximum, upsampled by `scale`.
    pub fn to_image(&self, scale: u32) -> image::GrayImage {
        let m = self.max();
        image::GrayImage::from_fn(self.width as u32 * scale, self.height as u32 * scale, |x, y| {
            let v = self.get((y / scale) as usize, (x / scale) as usize);
            image::Luma([if m > 0.0 { (v / m * 255.0).round() as u8 } else { 0 }])
        })
    }
}

/// Sum of unnormalized isotropic Gaussians evaluated at cell centers.
pub fn render_heatmap(points: &[Point2D], sigma: f64, height: usize, width: usize) -> Result<Heatmap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut map = Heatmap::zeros(height, width);
    let two_s2 = 2.0 * sigma * sigma;
    for p in points {
        for y in 0..height {
            let dy = y as f64 + 0.5 - p.y;
            for x in 0..width {
                let dx = x as f64 + 0.5 - p.x;
                map.values[y * width + x] += (-(dx * dx + dy * dy) / two_s2).exp();
            }
        }
    }
    Ok(map)
}

/// Image pixel coordinates to grid coordinates.
pub fn to_grid(p: Point2D, image_width: f64, image_height: f64, grid_width: usize, grid_height: usize) -> Point2D {
    Point2D::new(
        p.x * grid_width as f64 / image_width,
        p.y * grid_height as f64 / image_height,
    )
}

/// Histogram intersection of the two sum-normalized maps; 0 if either is empty.
pub fn sim(m: &Heatmap, m_hat: &Heatmap) -> Result<f64> {
    m.check_same_shape(m_hat)?;
    let (n, n_hat) = (m.sum(), m_hat.sum());
    if n <= 0.0 || n_hat <= 0.0 {
        return Ok(0.0);
    }
    Ok(m.values
        .iter()
        .zip(&m_hat.values)
        .map(|(a, b)| (a / n).min(b / n_hat))
        .sum())
}

/// Sum of the standardized prediction `M` over cells where the reference
/// `M_hat` is positive. Zero when `M` has no variance or `M_hat` no positive cell.
pub fn nss(m: &Heatmap, m_hat: &Heatmap) -> Result<f64> {
    m.check_same_shape(m_hat)?;
    let count = m.values.len() as f64;
    let mean = m.sum() / count;
    let var = m.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt();
    if std == 0.0 || !m_hat.values.iter().any(|&v| v > 0.0) {
        return Ok(0.0);
    }
    Ok(m.values
        .iter()
        .zip(&m_hat.values)
        .filter(|(_, &h)| h > 0.0)
        .map(|(v, _)| (v - mean) / std)
        .sum())
}

/// Anything that maps images to fixed-width feature vectors.
pub trait FeatureEncoder {
    fn name(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>>;
}

impl FeatureEncoder for crate::prior_model::PriorModel {
    fn name(&self) -> String {
        format!("prior-{:?}-d{}", self.config().encoder, self.config().embedding_dim).to_lowercase()
    }

    fn feature_dim(&self) -> usize {
        self.config().embedding_dim
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        self.encode_batch(images)
    }
}

/// Frozen features of one image with its ground-truth contact points in grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub sample_id: String,
    pub features: Vec<f32>,
    pub points: Vec<Point2D>,
}

/// Encodes every image; ground truth is both fingertips scaled to the grid.
pub fn build_feature_dataset(encoder: &dyn FeatureEncoder, dataset: &LoadedDataset, grid: usize) -> Result<Vec<FeatureSample>> {
    let refs: Vec<&RgbImage> = dataset.images.iter().collect();
    let features = encoder.encode_images(&refs)?;
    Ok(dataset
        .records
        .iter()
        .zip(&dataset.images)
        .zip(features)
        .map(|((rec, img), features)| {
            let (w, h) = (img.width() as f64, img.height() as f64);
            let (thumb, index) = rec.contact_points();
            FeatureSample {
                sample_id: rec.sample_id.clone(),
                features,
                points: vec![to_grid(thumb, w, h, grid, grid), to_grid(index, w, h, grid, grid)],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub num_predictions: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub sigma: f64,
    pub grid: usize,
    /// Ground-truth cells below this fraction of the map maximum are treated
    /// as outside the fixation set when computing NSS. 0 keeps the literal
    /// definition, under which an untruncated Gaussian covers every cell.
    pub nss_support_fraction: f64,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 256,
            kl_weight: 1.0,
            num_predictions: 5,
            iterations: 3000,
            eval_every: 150,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            sigma: DEFAULT_SIGMA,
            grid: GRID,
            nss_support_fraction: 0.0,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_predictions == 0 || self.latent_dim == 0 || self.hidden == 0 || self.grid == 0 {
            return Err(Error::InvalidConfig("cVAE sizes must be positive".into()));
        }
        if self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("eval_every and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.nss_support_fraction) {
            return Err(Error::InvalidConfig("nss_support_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, summed over the
/// latent dimension and averaged over the batch.
pub fn kl_to_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let b = mu.dims2()?.0 as f64;
    let terms = ((logvar.exp()? + mu.sqr()?)? - logvar)? - 1.0;
    Ok((terms?.sum_all()? * (0.5 / b))?)
}

pub struct CvaeHead {
    config: CvaeConfig,
    feature_dim: usize,
    params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
}

impl CvaeHead {
    pub fn new(feature_dim: usize, config: CvaeConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let (h, z) = (config.hidden, config.latent_dim);
        let encoder = Mlp::new(&mut params, "encoder", &[feature_dim + 2, h, h, 2 * z], Activation::Relu)?;
        let decoder = Mlp::new(&mut params, "decoder", &[feature_dim + z, h, h, 2], Activation::Relu)?;
        Ok(Self {
            config,
            feature_dim,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    fn features(&self, rows: &[&[f32]]) -> Result<Tensor> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.feature_dim) {
            return Err(Error::shape(self.feature_dim, r.len()));
        }
        let owned: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        matrix(&owned, self.feature_dim)
    }

    /// Targets are grid coordinates scaled to [0, 1].
    fn loss(&self, feats: &Tensor, targets: &Tensor, eps: &Tensor) -> Result<(Tensor, f64, f64)> {
        let z = self.config.latent_dim;
        let stats = self.encoder.forward(&Tensor::cat(&[feats, targets], 1)?)?;
        let mu = stats.narrow(1, 0, z)?;
        let logvar = stats.narrow(1, z, z)?.clamp(-10f32, 10f32)?;
        let sample = (&mu + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let pred = self.decoder.forward(&Tensor::cat(&[feats, &sample], 1)?)?;
        let recon = (pred - targets)?.sqr()?.sum(D::Minus1)?.mean_all()?;
        let kl = kl_to_standard_normal(&mu, &logvar)?;
        let r = recon.to_scalar::<f32>()? as f64;
        let k = kl.to_scalar::<f32>()? as f64;
        Ok(((recon + (kl * self.config.kl_weight)?)?, r, k))
    }

    /// `c` sampled contact points (grid coordinates) per feature row. The
    /// latent draws depend only on `seed` and the row position.
    pub fn predict(&self, rows: &[&[f32]], seed: u64) -> Result<Vec<Vec<Point2D>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.config.num_predictions;
        let z = self.config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f32> = (0..rows.len() * c * z).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps, (rows.len() * c, z), &device())?;
        let feats = self.features(rows)?;
        let idx: Vec<u32> = (0..rows.len() as u32).flat_map(|i| std::iter::repeat(i).take(c)).collect();
        let feats = feats.index_select(&Tensor::new(idx.as_slice(), &device())?, 0)?;
        let out = self.decoder.forward(&Tensor::cat(&[&feats, &eps], 1)?)?.to_vec2::<f32>()?;
        let g = self.config.grid as f64;
        Ok(out
            .chunks(c)
            .map(|ch| ch.iter().map(|v| Point2D::new(v[0] as f64 * g, v[1] as f64 * g)).collect())
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(CHECKPOINT_KIND)
            .with_config(&self.config)?
            .with_meta(SEED_KEY, self.config.seed)
            .with_meta("feature_dim", self.feature_dim)
            .extend(self.params.named_tensors()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let dim = ck.meta_u64("feature_dim").ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: "missing feature_dim".into(),
        })?;
        let head = Self::new(dim as usize, ck.config()?)?;
        head.params.load(&ck.tensors, "")?;
        Ok(head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    #[serde(rename = "SIM")]
    pub sim: f64,
    #[serde(rename = "NSS")]
    pub nss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub encoder_name: String,
    #[serde(rename = "mean_SIM")]
    pub mean_sim: f64,
    #[serde(rename = "mean_NSS")]
    pub mean_nss: f64,
    pub n_samples: usize,
}

/// Per-sample SIM/NSS of predicted points against ground-truth points (grid coordinates).
pub fn score_predictions(
    sample_id: &str,
    predicted: &[Point2D],
    truth: &[Point2D],
    config: &CvaeConfig,
) -> Result<EvalRecord> {
    let m = render_heatmap(predicted, config.sigma, config.grid, config.grid)?;
    let m_hat = render_heatmap(truth, config.sigma, config.grid, config.grid)?;
    let fixations = if config.nss_support_fraction > 0.0 {
        m_hat.truncated(config.nss_support_fraction)
    } else {
        m_hat.clone()
    };
    Ok(EvalRecord {
        sample_id: sample_id.to_string(),
        sim: sim(&m, &m_hat)?,
        nss: nss(&m, &fixations)?,
    })
}

/// Mean of per-sample records, accumulated in sample order.
pub fn summarize(encoder_name: &str, records: &[EvalRecord]) -> EvalSummary {
    let n = records.len();
    let mean = |f: fn(&EvalRecord) -> f64| if n == 0 { 0.0 } else { records.iter().map(f).sum::<f64>() / n as f64 };
    EvalSummary {
        encoder_name: encoder_name.to_string(),
        mean_sim: mean(|r| r.sim),
        mean_nss: mean(|r| r.nss),
        n_samples: n,
    }
}

pub fn evaluate_head(head: &CvaeHead, samples: &[FeatureSample], seed: u64) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(256).enumerate() {
        let rows: Vec<&[f32]> = chunk.iter().map(|s| s.features.as_slice()).collect();
        let preds = head.predict(&rows, seed.wrapping_add(ci as u64))?;
        for (s, p) in chunk.iter().zip(preds) {
            records.push(score_predictions(&s.sample_id, &p, &s.points, &head.config)?);
        }
    }
    Ok(records)
}

/// Encodes `dataset` with `encoder`, predicts with `head` and scores every image.
pub fn evaluate_encoder(
    encoder: &dyn FeatureEncoder,
    head: &CvaeHead,
    dataset: &LoadedDataset,
    seed: u64,
) -> Result<(EvalSummary, Vec<EvalRecord>)> {
    let samples = build_feature_dataset(encoder, dataset, head.config.grid)?;
    let records = evaluate_head(head, &samples, seed)?;
    Ok((summarize(&encoder.name(), &records), records))
}

/// Index of the highest score; the earliest wins ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if s <= b => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeEval {
    pub iteration: usize,
    pub train_loss: f64,
    pub mean_sim: f64,
    pub mean_nss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeTrainingReport {
    pub evals: Vec<CvaeEval>,
    pub best_iteration: usize,
    pub best_sim: f64,
}

/// Trains on every (image, fingertip) pair, evaluates on `held_out` every
/// `eval_every` iterations and returns the head from the evaluation with the
/// highest mean SIM.
pub fn train_cvae(
    train: &[FeatureSample],
    held_out: &[FeatureSample],
    config: &CvaeConfig,
) -> Result<(CvaeHead, CvaeTrainingReport)> {
    let pairs: Vec<(usize, Point2D)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.points.iter().map(move |p| (i, *p)))
        .collect();
    if pairs.is_empty() || held_out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = train[0].features.len();
    let head = CvaeHead::new(dim, config.clone())?;
    let mut opt = AdamW::new(head.params.select(&[""]), config.optimizer)?;
    let g = config.grid as f32;
    let mut evals = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;
    let mut recent = Vec::new();
    for it in 0..config.iterations {
        let idx = batch_indices(pairs.len(), config.batch_size, config.seed, it as u64);
        let rows: Vec<&[f32]> = idx.iter().map(|&i| train[pairs[i].0].features.as_slice()).collect();
        let feats = head.features(&rows)?;
        let targets = matrix(
            &idx.iter().map(|&i| vec![pairs[i].1.x as f32 / g, pairs[i].1.y as f32 / g]).collect::<Vec<_>>(),
            2,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (it as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let eps: Vec<f32> = (0..idx.len() * config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps, (idx.len(), config.latent_dim), &device())?;
        let (loss, _, _) = head.loss(&feats, &targets, &eps)?;
        recent.push(loss.to_scalar::<f32>()? as f64);
        opt.backward_step(&loss)?;
        let done = it + 1;
        if done % config.eval_every == 0 || done == config.iterations {
            let records = evaluate_head(&head, held_out, config.seed)?;
            let summary = summarize("", &records);
            evals.push(CvaeEval {
                iteration: done,
                train_loss: recent.iter().sum::<f64>() / recent.len() as f64,
                mean_sim: summary.mean_sim,
                mean_nss: summary.mean_nss,
            });
            recent.clear();
            if best.as_ref().is_none_or(|(_, s, _)| summary.mean_sim > *s) {
                let snapshot = head
                    .params
                    .named_tensors()
                    .into_iter()
                    .map(|(k, t)| Ok((k, t.copy()?)))
                    .collect::<Result<_>>()?;
                best = Some((done, summary.mean_sim, snapshot));
            }
        }
    }
    let (best_iteration, best_sim) = match best {
        Some((it, s, snapshot)) => {
            let map: BTreeMap<String, Tensor> = snapshot.into_iter().collect();
            head.params.load(&map, "")?;
            (it, s)
        }
        None => (0, 0.0),
    };
    debug_assert_eq!(
        select_best(&evals.iter().map(|e| e.mean_sim).collect::<Vec<_>>()).map(|i| evals[i].iteration),
        (best_iteration > 0).then_some(best_iteration)
    );
    Ok((
        head,
        CvaeTrainingReport {
            evals,
            best_iteration,
            best_sim,
        },
    ))
}

/// Checkpoint with the selected iteration recorded.
pub fn save_selected(head: &CvaeHead, report: &CvaeTrainingReport, path: &Path) -> Result<()> {
    head.to_checkpoint()?.with_meta(STEP_KEY, report.best_iteration).save(path)
}
