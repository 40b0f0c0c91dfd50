//! Behavior cloning on frozen visual features and the simulation evaluation
//! protocol (best-of-evaluations per run, mean over view x seed runs).
//!
//! Environments expose proprioception and renders; the harness turns a
//! render into visual features with a frozen [`FeatureEncoder`] and feeds
//! `features ++ proprio` to the policy.

use std::collections::BTreeMap;

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contact_eval::FeatureEncoder;
use crate::error::{Error, Result};
use crate::nn::{batch_indices, device, matrix, Activation, Mlp, ParamStore};
use crate::optim::{AdamW, AdamWConfig};

/// A controllable, renderable task. Must be deterministic given the reset
/// seed and the action sequence.
pub trait EnvironmentInterface {
    fn horizon(&self) -> usize;
    fn proprio_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn num_views(&self) -> usize;
    /// Starts an episode with a randomized scene; returns proprioception.
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    /// Applies one action; returns proprioception and whether the episode ended.
    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, bool)>;
    fn success(&self) -> bool;
    fn render(&self, view: usize) -> Result<RgbImage>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visual_features: Vec<f32>,
    pub proprio: Vec<f64>,
}

impl Observation {
    pub fn input(&self) -> Vec<f32> {
        let mut v = self.visual_features.clone();
        v.extend(self.proprio.iter().map(|&p| p as f32));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub steps: Vec<(Observation, Vec<f64>)>,
}

pub fn observe(env: &dyn EnvironmentInterface, encoder: &dyn FeatureEncoder, view: usize, proprio: Vec<f64>) -> Result<Observation> {
    let image = env.render(view)?;
    let visual_features = encoder.encode_images(&[&image])?.remove(0);
    Ok(Observation {
        visual_features,
        proprio,
    })
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma` per dimension.
pub fn add_action_noise(action: &[f64], sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(action.to_vec());
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(action.iter().map(|a| a + dist.sample(rng)).collect())
}

// ---------------------------------------------------------------------------
// Toy reach-grasp-place environment.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEnvConfig {
    pub image_size: u32,
    pub horizon: usize,
    pub object_radius: f64,
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub gripper_start: [f64; 2],
    /// Maximum cursor displacement per step (workspace units).
    pub max_speed: f64,
    /// Maximum aperture change per step.
    pub aperture_rate: f64,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            horizon: 750,
            object_radius: 0.06,
            goal_center: [0.8, 0.8],
            goal_radius: 0.1,
            gripper_start: [0.2, 0.2],
            max_speed: 0.02,
            aperture_rate: 0.25,
        }
    }
}

/// State of the 2D tabletop: a cursor gripper with an aperture, one disk
/// object and a goal disk. Proprioception is `[x, y, aperture]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvState {
    pub gripper: [f64; 2],
    pub aperture: f64,
    pub object: [f64; 2],
    pub held: bool,
    pub steps: usize,
    pub succeeded: bool,
}

pub struct ToyEnv {
    config: ToyEnvConfig,
    state: ToyEnvState,
}

const CLOSED: f64 = 0.5;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl ToyEnv {
    pub fn new(config: ToyEnvConfig) -> Self {
        let state = ToyEnvState {
            gripper: config.gripper_start,
            aperture: 1.0,
            object: [0.5, 0.5],
            held: false,
            steps: 0,
            succeeded: false,
        };
        Self { config, state }
    }

    pub fn config(&self) -> &ToyEnvConfig {
        &self.config
    }

    pub fn state(&self) -> &ToyEnvState {
        &self.state
    }

    fn proprio(&self) -> Vec<f64> {
        vec![self.state.gripper[0], self.state.gripper[1], self.state.aperture]
    }

    /// Scripted expert: open and move to the object, close on it, carry it
    /// to the goal center, release. Actions lie in `[-1, 1]^3`.
    pub fn expert_action(&self) -> Vec<f64> {
        let s = &self.state;
        let toward = |target: [f64; 2]| {
            let dx = (target[0] - s.gripper[0]) / self.config.max_speed;
            let dy = (target[1] - s.gripper[1]) / self.config.max_speed;
            [dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0)]
        };
        if s.held {
            if dist(s.object, self.config.goal_center) > 0.02 {
                let m = toward(self.config.goal_center);
                vec![m[0], m[1], -1.0]
            } else {
                vec![0.0, 0.0, 1.0]
            }
        } else if s.aperture < CLOSED {
            vec![0.0, 0.0, 1.0]
        } else if dist(s.gripper, s.object) > 0.01 {
            let m = toward(s.object);
            vec![m[0], m[1], 1.0]
        } else {
            vec![0.0, 0.0, -1.0]
        }
    }

    fn view_to_world(view: usize, u: f64, v: f64) -> [f64; 2] {
        match view {
            1 => [1.0 - u, v],
            2 => [v, u],
            _ => [u, v],
        }
    }
}

impl Default for ToyEnv {
    fn default() -> Self {
        Self::new(ToyEnvConfig::default())
    }
}

impl EnvironmentInterface for ToyEnv {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn proprio_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn num_views(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.config.object_radius;
        let object = loop {
            let p = [rng.random_range(r + 0.1..1.0 - r - 0.1), rng.random_range(r + 0.1..1.0 - r - 0.1)];
            if dist(p, self.config.goal_center) > self.config.goal_radius + 2.0 * r
                && dist(p, self.config.gripper_start) > 2.0 * r
            {
                break p;
            }
        };
        self.state = ToyEnvState {
            gripper: self.config.gripper_start,
            aperture: 1.0,
            object,
            held: false,
            steps: 0,
            succeeded: false,
        };
        Ok(self.proprio())
    }

    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, bool)> {
        if action.len() != 3 {
            return Err(Error::DimensionMismatch(format!("expected 3 action values, got {}", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let s = &mut self.state;
        if s.succeeded || s.steps >= self.config.horizon {
            return Ok((self.proprio(), true));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let was_open = s.aperture >= CLOSED;
        s.gripper[0] = (s.gripper[0] + a[0] * self.config.max_speed).clamp(0.0, 1.0);
        s.gripper[1] = (s.gripper[1] + a[1] * self.config.max_speed).clamp(0.0, 1.0);
        s.aperture = (s.aperture + a[2] * self.config.aperture_rate).clamp(0.0, 1.0);
        let closed = s.aperture < CLOSED;
        if closed && was_open && dist(s.gripper, s.object) <= self.config.object_radius {
            s.held = true;
        }
        if !closed {
            s.held = false;
        }
        if s.held {
            s.object = s.gripper;
        }
        s.steps += 1;
        s.succeeded = !s.held && dist(s.object, self.config.goal_center) <= self.config.goal_radius;
        let done = s.succeeded || s.steps >= self.config.horizon;
        Ok((self.proprio(), done))
    }

    fn success(&self) -> bool {
        self.state.succeeded
    }

    /// Object in the red channel, gripper marker (grows with aperture) in
    /// green, goal in blue. Views 1 and 2 mirror and transpose the scene.
    fn render(&self, view: usize) -> Result<RgbImage> {
        if view >= 3 {
            return Err(Error::OutOfRange {
                value: view as f64,
                lo: 0.0,
                hi: 2.0,
            });
        }
        let n = self.config.image_size;
        let s = &self.state;
        let grip_r = 0.025 + 0.025 * s.aperture;
        Ok(RgbImage::from_fn(n, n, |px, py| {
            let u = (px as f64 + 0.5) / n as f64;
            let v = (py as f64 + 0.5) / n as f64;
            let w = Self::view_to_world(view, u, v);
            let red = if dist(w, s.object) <= self.config.object_radius { 255 } else { 30 };
            let green = if dist(w, s.gripper) <= grip_r { 255 } else { 30 };
            let blue = if dist(w, self.config.goal_center) <= self.config.goal_radius { 200 } else { 30 };
            Rgb([red, green, blue])
        }))
    }
}

/// Parameter-free encoder: per-channel average pooling over `cell x cell`
/// blocks, scaled to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledPixelEncoder {
    pub image_size: u32,
    pub cell: u32,
}

impl Default for PooledPixelEncoder {
    fn default() -> Self {
        Self { image_size: 64, cell: 8 }
    }
}

impl FeatureEncoder for PooledPixelEncoder {
    fn name(&self) -> String {
        format!("pooled-pixels-{}", self.cell)
    }

    fn feature_dim(&self) -> usize {
        let g = (self.image_size / self.cell) as usize;
        3 * g * g
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        let g = self.image_size / self.cell;
        images
            .iter()
            .map(|img| {
                if img.width() != self.image_size || img.height() != self.image_size {
                    return Err(Error::shape(self.image_size, img.width()));
                }
                let mut out = vec![0f32; self.feature_dim()];
                let norm = (self.cell * self.cell) as f32 * 255.0;
                for (x, y, p) in img.enumerate_pixels() {
                    let cell = ((y / self.cell) * g + x / self.cell) as usize;
                    for c in 0..3 {
                        out[c * (g * g) as usize + cell] += p.0[c] as f32 / norm;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Parameter-free keypoint encoder: per channel, the centroid of the
/// intensity above the channel minimum (normalized to [0, 1]) and that
/// excess intensity's mean. Nine features for an RGB image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CentroidEncoder;

impl FeatureEncoder for CentroidEncoder {
    fn name(&self) -> String {
        "channel-centroids".into()
    }

    fn feature_dim(&self) -> usize {
        9
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        Ok(images
            .iter()
            .map(|img| {
                let (w, h) = (img.width() as f64, img.height() as f64);
                let mut out = Vec::with_capacity(9);
                for c in 0..3 {
                    let lo = img.pixels().map(|p| p.0[c]).min().unwrap_or(0) as f64;
                    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
                    for (x, y, p) in img.enumerate_pixels() {
                        let v = p.0[c] as f64 - lo;
                        m += v;
                        sx += v * (x as f64 + 0.5);
                        sy += v * (y as f64 + 0.5);
                    }
                    let (cx, cy) = if m > 0.0 { (sx / m / w, sy / m / h) } else { (0.5, 0.5) };
                    out.extend([cx as f32, cy as f32, (m / (w * h * 255.0)) as f32]);
                }
                out
            })
            .collect())
    }
}

/// Adapts an encoder trained at another resolution by resizing renders first.
pub struct ResizingEncoder<'a> {
    pub inner: &'a dyn FeatureEncoder,
    pub size: u32,
}

impl FeatureEncoder for ResizingEncoder<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        let resized: Vec<RgbImage> = images
            .iter()
            .map(|i| image::imageops::resize(*i, self.size, self.size, image::imageops::FilterType::Triangle))
            .collect();
        self.inner.encode_images(&resized.iter().collect::<Vec<_>>())
    }
}

/// Rolls out the scripted expert from `n` seeds derived from `seed`.
pub fn collect_expert_demonstrations(
    env: &mut ToyEnv,
    encoder: &dyn FeatureEncoder,
    view: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    (0..n)
        .map(|i| {
            let mut proprio = env.reset(derive_seed(&[seed, 0xDE70, i as u64]))?;
            let mut steps = Vec::new();
            loop {
                let action = env.expert_action();
                let obs = observe(env, encoder, view, proprio)?;
                let (p, done) = env.step(&action)?;
                steps.push((obs, action));
                proprio = p;
                if done {
                    break;
                }
            }
            Ok(Demonstration { steps })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Behavior cloning.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            batch_size: 256,
            steps: 2000,
            seed: 0,
        }
    }
}

pub struct BcPolicy {
    mlp: Mlp,
    params: ParamStore,
    input_mean: Tensor,
    input_std: Tensor,
    input_dim: usize,
    action_dim: usize,
}

impl BcPolicy {
    pub fn act(&self, obs: &Observation) -> Result<Vec<f64>> {
        let x = obs.input();
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "policy expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let t = Tensor::from_vec(x, (1, self.input_dim), &device())?;
        Ok(self
            .forward(&t)?
            .squeeze(0)?
            .to_vec1::<f32>()?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&x.broadcast_sub(&self.input_mean)?.broadcast_div(&self.input_std)?)
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn fingerprint(&self) -> Result<String> {
        crate::nn::fingerprint(&self.params.named_tensors())
    }
}

/// Incremental BC trainer so the protocol can interleave training and evaluation.
pub struct BcTrainer {
    policy: BcPolicy,
    opt: AdamW,
    inputs: Tensor,
    actions: Tensor,
    config: PolicyConfig,
    step: usize,
    pub losses: Vec<f64>,
}

impl BcTrainer {
    pub fn new(demos: &[Demonstration], encoder: &dyn FeatureEncoder, config: &PolicyConfig) -> Result<Self> {
        let pairs: Vec<&(Observation, Vec<f64>)> = demos.iter().flat_map(|d| d.steps.iter()).collect();
        let Some(first) = pairs.first() else {
            return Err(Error::EmptyDataset);
        };
        let feat_dim = encoder.feature_dim();
        let proprio_dim = first.0.proprio.len();
        let action_dim = first.1.len();
        for (obs, a) in &pairs {
            if obs.visual_features.len() != feat_dim || obs.proprio.len() != proprio_dim || a.len() != action_dim {
                return Err(Error::DimensionMismatch(format!(
                    "demonstration step has {}+{} inputs and {} actions; expected {feat_dim}+{proprio_dim} and {action_dim}",
                    obs.visual_features.len(),
                    obs.proprio.len(),
                    a.len()
                )));
            }
        }
        let input_dim = feat_dim + proprio_dim;
        let rows: Vec<Vec<f32>> = pairs.iter().map(|(o, _)| o.input()).collect();
        let inputs = matrix(&rows, input_dim)?;
        let actions = matrix(
            &pairs.iter().map(|(_, a)| a.iter().map(|&v| v as f32).collect()).collect::<Vec<_>>(),
            action_dim,
        )?;
        let input_mean = inputs.mean_keepdim(0)?;
        let var = inputs.broadcast_sub(&input_mean)?.sqr()?.mean_keepdim(0)?;
        // Constant inputs keep unit scale.
        let input_std = var.sqrt()?.maximum(1e-3)?.broadcast_add(&(var.eq(0f32)?.to_dtype(candle_core::DType::F32)?))?;

        let mut params = ParamStore::new(config.seed);
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(action_dim);
        let mlp = Mlp::new(&mut params, "policy", &dims, Activation::Relu)?;
        let opt = AdamW::new(params.select(&[""]), config.optimizer)?;
        Ok(Self {
            policy: BcPolicy {
                mlp,
                params,
                input_mean,
                input_std,
                input_dim,
                action_dim,
            },
            opt,
            inputs,
            actions,
            config: config.clone(),
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn train(&mut self, steps: usize) -> Result<()> {
        let n = self.inputs.dims2()?.0;
        for _ in 0..steps {
            let idx = batch_indices(n, self.config.batch_size, self.config.seed, self.step as u64);
            let idx = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &device())?;
            let x = self.inputs.index_select(&idx, 0)?;
            let y = self.actions.index_select(&idx, 0)?;
            let loss = (self.policy.forward(&x)? - y)?.sqr()?.mean_all()?;
            self.losses.push(loss.to_scalar::<f32>()? as f64);
            self.opt.backward_step(&loss)?;
            self.step += 1;
        }
        Ok(())
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn policy(&self) -> &BcPolicy {
        &self.policy
    }

    pub fn into_policy(self) -> BcPolicy {
        self.policy
    }
}

/// MLP on `visual_features ++ proprio` trained by mean-squared action regression.
/// The encoder is only read (for its feature width); it is never modified.
pub fn train_bc(demos: &[Demonstration], encoder: &dyn FeatureEncoder, config: &PolicyConfig) -> Result<(BcPolicy, Vec<f64>)> {
    let mut trainer = BcTrainer::new(demos, encoder, config)?;
    trainer.train(config.steps)?;
    let losses = std::mem::take(&mut trainer.losses);
    Ok((trainer.into_policy(), losses))
}

/// Success rate in percent over seeded rollouts.
pub fn evaluate_policy(
    act: &dyn Fn(&Observation) -> Result<Vec<f64>>,
    env: &mut dyn EnvironmentInterface,
    encoder: &dyn FeatureEncoder,
    view: usize,
    seeds: &[u64],
    noise_sigma: f64,
) -> Result<f64> {
    if seeds.is_empty() {
        return Ok(0.0);
    }
    let mut successes = 0usize;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x401_5E]));
        let mut proprio = env.reset(seed)?;
        for _ in 0..env.horizon() {
            let obs = observe(env, encoder, view, proprio)?;
            let action = add_action_noise(&act(&obs)?, noise_sigma, &mut rng)?;
            let (p, done) = env.step(&action)?;
            proprio = p;
            if done {
                break;
            }
        }
        if env.success() {
            successes += 1;
        }
    }
    Ok(100.0 * successes as f64 / seeds.len() as f64)
}

// ---------------------------------------------------------------------------
// Evaluation protocol.

/// Stable seed derivation from a path of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01B3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub total_steps: usize,
    pub eval_every: usize,
    pub rollouts: usize,
    pub views: usize,
    pub seeds: usize,
    pub action_noise_sigma: f64,
    pub base_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            eval_every: 1_000,
            rollouts: 50,
            views: 3,
            seeds: 3,
            action_noise_sigma: 0.05,
            base_seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn num_evaluations(&self) -> usize {
        self.total_steps / self.eval_every.max(1)
    }
}

/// What the protocol trains and evaluates: one independent training run per (view, seed).
pub trait ProtocolSubject {
    fn begin_run(&mut self, view: usize, seed: u64) -> Result<()>;
    fn train(&mut self, steps: usize) -> Result<()>;
    fn act(&self, observation: &Observation) -> Result<Vec<f64>>;
    fn encoder(&self) -> &dyn FeatureEncoder;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub view: usize,
    pub seed: usize,
    pub steps: Vec<usize>,
    pub rates: Vec<f64>,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub runs: Vec<RunReport>,
    pub final_score: f64,
}

/// Best-of-evaluations per run and the mean of the run bests.
pub fn aggregate(runs: Vec<(usize, usize, Vec<usize>, Vec<f64>)>) -> ProtocolReport {
    let runs: Vec<RunReport> = runs
        .into_iter()
        .map(|(view, seed, steps, rates)| RunReport {
            view,
            seed,
            best: rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0),
            steps,
            rates,
        })
        .collect();
    let final_score = if runs.is_empty() {
        0.0
    } else {
        runs.iter().map(|r| r.best).sum::<f64>() / runs.len() as f64
    };
    ProtocolReport { runs, final_score }
}

/// Runs every (view, seed) training run, evaluating `rollouts` episodes
/// every `eval_every` steps. Rollout seeds derive from
/// (base_seed, view, seed, evaluation, rollout).
pub fn run_protocol(
    subject: &mut dyn ProtocolSubject,
    env: &mut dyn EnvironmentInterface,
    config: &ProtocolConfig,
) -> Result<ProtocolReport> {
    if config.eval_every == 0 || config.views > env.num_views() {
        return Err(Error::InvalidConfig(format!(
            "protocol needs eval_every > 0 and at most {} views",
            env.num_views()
        )));
    }
    let mut runs = Vec::new();
    for view in 0..config.views {
        for seed in 0..config.seeds {
            let run_id = format!("view{view}-seed{seed}");
            let wrap = |e: Error, stage: &str| Error::Environment {
                run: format!("{run_id}-{stage}"),
                message: e.to_string(),
            };
            let run_seed = derive_seed(&[config.base_seed, view as u64, seed as u64]);
            subject.begin_run(view, run_seed).map_err(|e| wrap(e, "init"))?;
            let mut steps = Vec::new();
            let mut rates = Vec::new();
            for eval in 0..config.num_evaluations() {
                subject.train(config.eval_every).map_err(|e| wrap(e, &format!("train{eval}")))?;
                let seeds: Vec<u64> = (0..config.rollouts)
                    .map(|r| derive_seed(&[config.base_seed, view as u64, seed as u64, eval as u64, r as u64]))
                    .collect();
                let subject_ref: &dyn ProtocolSubject = subject;
                let rate = evaluate_policy(
                    &|o: &Observation| subject_ref.act(o),
                    env,
                    subject_ref.encoder(),
                    view,
                    &seeds,
                    config.action_noise_sigma,
                )
                .map_err(|e| wrap(e, &format!("eval{eval}")))?;
                steps.push((eval + 1) * config.eval_every);
                rates.push(rate);
                log::info!("{run_id} eval {eval}: {rate:.1}%");
            }
            runs.push((view, seed, steps, rates));
        }
    }
    Ok(aggregate(runs))
}

/// BC on expert demonstrations collected per view, with a frozen encoder.
pub struct BcSubject<'a> {
    pub encoder: &'a dyn FeatureEncoder,
    pub demos_per_view: BTreeMap<usize, Vec<Demonstration>>,
    pub policy: PolicyConfig,
    trainer: Option<BcTrainer>,
}

impl<'a> BcSubject<'a> {
    pub fn new(encoder: &'a dyn FeatureEncoder, demos_per_view: BTreeMap<usize, Vec<Demonstration>>, policy: PolicyConfig) -> Self {
        Self {
            encoder,
            demos_per_view,
            policy,
            trainer: None,
        }
    }
}

impl ProtocolSubject for BcSubject<'_> {
    fn begin_run(&mut self, view: usize, seed: u64) -> Result<()> {
        let demos = self
            .demos_per_view
            .get(&view)
            .ok_or_else(|| Error::InvalidConfig(format!("no demonstrations for view {view}")))?;
        let config = PolicyConfig {
            seed,
            ..self.policy.clone()
        };
        self.trainer = Some(BcTrainer::new(demos, self.encoder, &config)?);
        Ok(())
    }

    fn train(&mut self, steps: usize) -> Result<()> {
        self.trainer
            .as_mut()
            .ok_or_else(|| Error::InvalidConfig("run not started".into()))?
            .train(steps)
    }

    fn act(&self, observation: &Observation) -> Result<Vec<f64>> {
        self.trainer
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("run not started".into()))?
            .policy()
            .act(observation)
    }

    fn encoder(&self) -> &dyn FeatureEncoder {
        self.encoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_env_is_deterministic_and_expert_solves_it() {
        let mut env = ToyEnv::default();
        let a = env.reset(5).unwrap();
        let obj = env.state().object;
        assert_eq!(a, env.reset(5).unwrap());
        assert_eq!(obj, env.state().object);
        assert_ne!(env.reset(6).unwrap().len(), 0);
        assert_ne!(obj, env.state().object);
        for seed in 0..200 {
            env.reset(seed).unwrap();
            let mut done = false;
            while !done {
                done = env.step(&env.expert_action()).unwrap().1;
            }
            assert!(env.success(), "expert failed on seed {seed}");
            assert!(env.state().steps < 250);
        }
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let mut env = ToyEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut wins = 0;
        for seed in 0..200 {
            env.reset(seed).unwrap();
            let mut done = false;
            while !done {
                let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                done = env.step(&a).unwrap().1;
            }
            wins += env.success() as usize;
        }
        assert!(wins < 10, "{wins}");
    }

    #[test]
    fn renders_and_views() {
        let mut env = ToyEnv::default();
        env.reset(1).unwrap();
        let v0 = env.render(0).unwrap();
        let v1 = env.render(1).unwrap();
        let v2 = env.render(2).unwrap();
        assert_eq!(v0.dimensions(), (64, 64));
        for (x, y, p) in v0.enumerate_pixels() {
            assert_eq!(p, v1.get_pixel(63 - x, y));
            assert_eq!(p, v2.get_pixel(y, x));
        }
        assert!(env.render(3).is_err());
        let enc = PooledPixelEncoder::default();
        let f = enc.encode_images(&[&v0]).unwrap();
        assert_eq!(f[0].len(), enc.feature_dim());
        assert!(f[0].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn action_noise_contract() {
        let a = [0.1, -0.4, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_action_noise(&a, 0.0, &mut rng).unwrap(), a.to_vec());
        let n1 = add_action_noise(&a, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let n2 = add_action_noise(&a, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(n1, n2);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| add_action_noise(&[0.0], 0.05, &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.0005, "{sd}");
        assert!(add_action_noise(&a, -1.0, &mut rng).is_err());
    }

    /// Features are a fixed function of proprio; actions a linear map of inputs.
    fn linear_demos(n: usize, seed: u64) -> Vec<Demonstration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = (0..n)
            .map(|_| {
                let f: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let p: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = vec![
                    0.5 * f[0] as f64 - 0.25 * f[3] as f64 + 0.3 * p[1],
                    -(f[1] as f64) + 0.1 * p[0] + 0.2,
                ];
                (
                    Observation {
                        visual_features: f,
                        proprio: p,
                    },
                    a,
                )
            })
            .collect();
        vec![Demonstration { steps }]
    }

    struct FixedDim(usize);
    impl FeatureEncoder for FixedDim {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn feature_dim(&self) -> usize {
            self.0
        }
        fn encode_images(&self, _: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
            Ok(vec![vec![0.0; self.0]])
        }
    }

    #[test]
    fn bc_fits_a_linear_expert() {
        let config = PolicyConfig {
            steps: 1500,
            batch_size: 128,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let (policy, losses) = train_bc(&linear_demos(2000, 1), &FixedDim(4), &config).unwrap();
        assert!(losses[..100].windows(10).all(|w| w[9] < w[0]) || losses[99] < losses[0]);
        let held = &linear_demos(200, 2)[0];
        let mut worst: f64 = 0.0;
        for (o, a) in &held.steps {
            let p = policy.act(o).unwrap();
            worst = worst.max(p.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        assert!(worst < 1e-2 * 3.0 && {
            let mse: f64 = held
                .steps
                .iter()
                .map(|(o, a)| policy.act(o).unwrap().iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 2.0)
                .sum::<f64>()
                / held.steps.len() as f64;
            mse.sqrt() < 1e-2
        }, "worst {worst}");
        assert!(matches!(train_bc(&[], &FixedDim(4), &config), Err(Error::EmptyDataset)));
        assert!(matches!(
            train_bc(&linear_demos(10, 1), &FixedDim(5), &config),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_demo_overfit_loss_decreases() {
        let mut env = ToyEnv::default();
        let enc = PooledPixelEncoder::default();
        let demos = collect_expert_demonstrations(&mut env, &enc, 0, 1, 3).unwrap();
        let config = PolicyConfig {
            steps: 100,
            ..Default::default()
        };
        let (_, losses) = train_bc(&demos, &enc, &config).unwrap();
        // The full demonstration fits in one batch, so the loss sequence is a
        // deterministic full-batch descent.
        let n: usize = demos[0].steps.len();
        assert!(n <= config.batch_size);
        assert!(losses[99] < 0.2 * losses[0], "{} -> {}", losses[0], losses[99]);
        assert!(losses.windows(2).filter(|w| w[1] >= w[0]).count() <= 5);
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        let rates = vec![10.0, 40.0, 30.0, 0.0];
        let r = aggregate(vec![(0, 0, vec![1, 2, 3, 4], rates)]);
        assert_eq!(r.runs[0].best, 40.0);
        let bests = [40.0, 52.0, 18.0, 100.0, 0.0, 64.0, 36.0, 90.0, 22.0];
        let runs = bests
            .iter()
            .enumerate()
            .map(|(i, &b)| (i / 3, i % 3, vec![1, 2], vec![b / 2.0, b]))
            .collect();
        let r = aggregate(runs);
        assert_eq!(r.final_score, (40.0 + 52.0 + 18.0 + 100.0 + 0.0 + 64.0 + 36.0 + 90.0 + 22.0) / 9.0);
    }
}
