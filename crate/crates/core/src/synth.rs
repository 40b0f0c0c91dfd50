//! Deterministic synthetic data with known ground truth.
//!
//! * approach sequences: a hand blob with two protruding fingers moves
//!   towards an object until the fingertips touch its boundary;
//! * pose corpora: prototype hand poses plus Gaussian joint noise;
//! * prior datasets: single-object scenes with contact points on the
//!   object boundary.
//!
//! Ground truth for approach sequences is computed here with brute-force
//! geometry (diamond-neighbourhood erosion, exhaustive projection, direct L1
//! distances to hand pixels) and does not go through the `geometry` module's
//! distance transforms.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{
    EventStatus, FrameAnnotation, HandDetection, HandObservation, HandPose, PerceptionOracle,
    VideoSource, NUM_JOINTS,
};
use crate::geometry::{BinaryMask, Point2D};
use crate::manifest::{ManifestRecord, SampleImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectShape {
    Disk { radius: f64 },
    Rect { half_width: f64, half_height: f64 },
}

impl ObjectShape {
    fn contains(&self, center: Point2D, p: Point2D) -> bool {
        let (dx, dy) = (p.x - center.x, p.y - center.y);
        match *self {
            ObjectShape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            ObjectShape::Rect {
                half_width,
                half_height,
            } => dx.abs() <= half_width && dy.abs() <= half_height,
        }
    }

    /// Signed position along `dir` at which the line `center + offset*perp + t*dir`
    /// first enters the shape, or `None` if it misses.
    fn entry(&self, dir: [f64; 2], offset: f64) -> Option<f64> {
        let perp = [-dir[1], dir[0]];
        match *self {
            ObjectShape::Disk { radius } => {
                (offset.abs() < radius).then(|| -(radius * radius - offset * offset).sqrt())
            }
            ObjectShape::Rect {
                half_width,
                half_height,
            } => {
                let origin = [offset * perp[0], offset * perp[1]];
                let mut t_lo = f64::NEG_INFINITY;
                let mut t_hi = f64::INFINITY;
                for (o, d, h) in [(origin[0], dir[0], half_width), (origin[1], dir[1], half_height)] {
                    if d.abs() < 1e-12 {
                        if o.abs() > h {
                            return None;
                        }
                    } else {
                        let (a, b) = ((-h - o) / d, (h - o) / d);
                        t_lo = t_lo.max(a.min(b));
                        t_hi = t_hi.min(a.max(b));
                    }
                }
                (t_lo <= t_hi).then_some(t_lo)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hover {
    /// Fingertip gap (px) held while hovering.
    pub gap: f64,
    pub frames: usize,
}

/// Parameters of one synthetic approach video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    pub object: ObjectShape,
    pub object_center: [f64; 2],
    pub object_color: [u8; 3],
    /// Object translation per frame.
    pub object_drift: [f64; 2],
    pub hand_radius: f64,
    pub finger_length: f64,
    /// Perpendicular offset of each fingertip from the approach axis.
    pub finger_spread: f64,
    /// Direction of hand motion, degrees (0 = +x, 90 = +y).
    pub approach_angle_deg: f64,
    /// Fingertip-to-boundary distance along the approach axis at frame 0.
    pub start_gap: f64,
    pub speed: f64,
    pub hover: Option<Hover>,
    /// Frames before this index show no hand.
    pub hand_visible_from: usize,
    /// Frames kept after the contact frame.
    pub contact_hold: usize,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            video_id: "synth-000".into(),
            width: 224,
            height: 224,
            object: ObjectShape::Disk { radius: 28.0 },
            object_center: [140.0, 112.0],
            object_color: [40, 90, 200],
            object_drift: [0.0, 0.0],
            hand_radius: 12.0,
            finger_length: 6.0,
            finger_spread: 5.0,
            approach_angle_deg: 0.0,
            start_gap: 100.0,
            speed: 3.0,
            hover: None,
            hand_visible_from: 0,
            contact_hold: 4,
            seed: 0,
        }
    }
}

/// Generator-side ground truth for one approach video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub video_id: String,
    pub contact_frame: usize,
    pub prediction_frame: Option<usize>,
    pub contact_points_contact_frame: Option<(Point2D, Point2D)>,
    pub contact_points_prediction_frame: Option<(Point2D, Point2D)>,
    pub status: EventStatus,
}

/// Fixed extraction parameters the ground truth is computed under.
pub const GT_EROSION: usize = 12;
pub const GT_DILATION: i64 = 75;
pub const GT_LOOKBACK: usize = 45;

struct FrameState {
    hand: BinaryMask,
    object: BinaryMask,
    thumb: Point2D,
    index: Point2D,
    confidence: f64,
}

/// A generated approach video. Implements both the frame source and the
/// perception oracle (exact masks, exact fingertips, exact tracking).
pub struct ApproachSequence {
    spec: SynthSceneSpec,
    frames: Vec<FrameState>,
    pose: HandPose,
    contact_frame: usize,
    ground_truth: GroundTruthEvent,
}

fn gap_schedule(spec: &SynthSceneSpec) -> Vec<f64> {
    let mut gaps = Vec::new();
    let mut g = spec.start_gap.max(0.0);
    let mut hovered = 0usize;
    loop {
        gaps.push(g);
        if g <= 0.0 {
            break;
        }
        match spec.hover {
            Some(h) if g <= h.gap && hovered < h.frames => {
                hovered += 1;
                g = h.gap.min(g);
            }
            Some(h) if g > h.gap && g - spec.speed < h.gap && hovered < h.frames => g = h.gap,
            _ => {
                g -= spec.speed;
                if g < 1e-9 {
                    g = 0.0;
                }
            }
        }
    }
    gaps
}

fn stamp_segment(mask: &mut BinaryMask, a: Point2D, b: Point2D) {
    let steps = (a.distance(&b) * 4.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let p = Point2D::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
        if let Some((x, y)) = p.pixel(mask.width(), mask.height()) {
            mask.set(x, y, true);
        }
    }
}

impl ApproachSequence {
    pub fn generate(spec: SynthSceneSpec) -> Result<Self> {
        validate_scene(&spec)?;
        let angle = spec.approach_angle_deg.to_radians();
        let dir = [angle.cos(), angle.sin()];
        let perp = [-dir[1], dir[0]];
        let offsets = [spec.finger_spread, -spec.finger_spread];
        let entries: Vec<f64> = offsets
            .iter()
            .map(|o| spec.object.entry(dir, *o))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidSpec("fingertips miss the object".into()))?;
        let front = entries.iter().copied().fold(f64::INFINITY, f64::min);

        let gaps = gap_schedule(&spec);
        let contact_frame = gaps.len() - 1;
        let num_frames = contact_frame + 1 + spec.contact_hold;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut frames = Vec::with_capacity(num_frames);
        for t in 0..num_frames {
            let gap = gaps.get(t).copied().unwrap_or(0.0);
            let center = Point2D::new(
                spec.object_center[0] + spec.object_drift[0] * t as f64,
                spec.object_center[1] + spec.object_drift[1] * t as f64,
            );
            let object = BinaryMask::from_fn(spec.width, spec.height, |x, y| {
                spec.object.contains(center, Point2D::pixel_center(x, y))
            });
            let along = front - gap;
            let tip = |o: f64| {
                Point2D::new(
                    center.x + o * perp[0] + along * dir[0],
                    center.y + o * perp[1] + along * dir[1],
                )
            };
            let thumb = tip(offsets[0]);
            let index = tip(offsets[1]);
            let back = along - spec.finger_length - spec.hand_radius;
            let palm = Point2D::new(center.x + back * dir[0], center.y + back * dir[1]);
            let mut hand = BinaryMask::new(spec.width, spec.height);
            if t >= spec.hand_visible_from {
                let r2 = spec.hand_radius * spec.hand_radius;
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        if Point2D::pixel_center(x, y).distance_sq(&palm) <= r2 {
                            hand.set(x, y, true);
                        }
                    }
                }
                for (o, tip) in offsets.iter().zip([thumb, index]) {
                    let base_along = back + spec.hand_radius - 1.0;
                    let base = Point2D::new(
                        center.x + o * perp[0] + base_along * dir[0],
                        center.y + o * perp[1] + base_along * dir[1],
                    );
                    stamp_segment(&mut hand, base, tip);
                }
            }
            let confidence = if gap <= 0.0 {
                rng.random_range(0.9..1.0)
            } else {
                rng.random_range(0.0..0.5)
            };
            frames.push(FrameState {
                hand,
                object,
                thumb,
                index,
                confidence,
            });
        }
        let pose = pose_for_seed(spec.seed);
        let mut seq = Self {
            spec,
            frames,
            pose,
            contact_frame,
            ground_truth: GroundTruthEvent {
                video_id: String::new(),
                contact_frame,
                prediction_frame: None,
                contact_points_contact_frame: None,
                contact_points_prediction_frame: None,
                status: EventStatus::Ok,
            },
        };
        seq.ground_truth = seq.compute_ground_truth();
        Ok(seq)
    }

    pub fn spec(&self) -> &SynthSceneSpec {
        &self.spec
    }

    pub fn contact_frame(&self) -> usize {
        self.contact_frame
    }

    pub fn ground_truth(&self) -> &GroundTruthEvent {
        &self.ground_truth
    }

    pub fn hand_pose(&self) -> &HandPose {
        &self.pose
    }

    fn hand_visible(&self, t: usize) -> bool {
        !self.frames[t].hand.is_empty()
    }

    fn tracked(&self, p: Point2D, from: usize, to: usize) -> Point2D {
        let dt = to as f64 - from as f64;
        Point2D::new(
            p.x + self.spec.object_drift[0] * dt,
            p.y + self.spec.object_drift[1] * dt,
        )
    }

    fn compute_ground_truth(&self) -> GroundTruthEvent {
        let fc = self.contact_frame;
        let mut gt = GroundTruthEvent {
            video_id: self.spec.video_id.clone(),
            contact_frame: fc,
            prediction_frame: None,
            contact_points_contact_frame: None,
            contact_points_prediction_frame: None,
            status: EventStatus::Ok,
        };
        let state = &self.frames[fc];
        let eroded = brute_force_erode(&state.object, GT_EROSION);
        let (Some(thumb), Some(index)) = (
            brute_force_nearest(&eroded, state.thumb),
            brute_force_nearest(&eroded, state.index),
        ) else {
            gt.status = EventStatus::DiscardedDegenerateMask;
            return gt;
        };
        let ratio = thumb.distance(&index) / state.thumb.distance(&state.index);
        if !(0.3..=1.7).contains(&ratio) {
            gt.status = EventStatus::DiscardedRatio;
            return gt;
        }
        gt.contact_points_contact_frame = Some((thumb, index));
        for step in 1..=GT_LOOKBACK.min(fc) {
            let t = fc - step;
            let p = (self.tracked(thumb, fc, t), self.tracked(index, fc, t));
            let contained = |q: Point2D| -> bool {
                let Some((qx, qy)) = q.pixel(self.spec.width, self.spec.height) else {
                    return false;
                };
                self.frames[t].hand.foreground().any(|(hx, hy)| {
                    (hx as i64 - qx as i64).abs() + (hy as i64 - qy as i64).abs() <= GT_DILATION
                })
            };
            if !self.hand_visible(t) || (!contained(p.0) && !contained(p.1)) {
                gt.prediction_frame = Some(t);
                gt.contact_points_prediction_frame = Some(p);
                return gt;
            }
        }
        gt.status = EventStatus::DiscardedTimeout;
        gt
    }

    fn render(&self, t: usize) -> RgbImage {
        let s = &self.frames[t];
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0xA5A5 ^ (t as u64) << 20);
        RgbImage::from_fn(self.spec.width as u32, self.spec.height as u32, |x, y| {
            let (xi, yi) = (x as i64, y as i64);
            let jitter = rng.random_range(0..6u8);
            if s.hand.get(xi, yi) {
                Rgb([220 - jitter, 170, 140])
            } else if s.object.get(xi, yi) {
                let c = self.spec.object_color;
                Rgb([c[0], c[1], c[2].saturating_sub(jitter)])
            } else {
                let base = 150 + (y / 16) as u8;
                Rgb([base + jitter, base + jitter, base])
            }
        })
    }
}

fn validate_scene(spec: &SynthSceneSpec) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
    if spec.width == 0 || spec.height == 0 {
        return bad("image size must be positive");
    }
    if !(spec.speed > 0.0) {
        return bad("speed must be positive");
    }
    if !(spec.hand_radius > 0.0) || spec.finger_length < 0.0 || spec.finger_spread <= 0.0 {
        return bad("hand geometry must be positive");
    }
    if let Some(h) = spec.hover {
        if h.gap < 0.0 {
            return bad("hover gap must be non-negative");
        }
    }
    Ok(())
}

/// Foreground pixels whose whole L1 ball of radius `k` is in-bounds foreground.
fn brute_force_erode(mask: &BinaryMask, k: usize) -> BinaryMask {
    let k = k as i64;
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as i64, y as i64);
        for dy in -k..=k {
            let span = k - dy.abs();
            for dx in -span..=span {
                if !mask.get(x + dx, y + dy) {
                    return false;
                }
            }
        }
        true
    })
}

fn brute_force_nearest(mask: &BinaryMask, p: Point2D) -> Option<Point2D> {
    let mut best: Option<(f64, Point2D)> = None;
    for (x, y) in mask.foreground() {
        let c = Point2D::pixel_center(x, y);
        let d = c.distance_sq(&p);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c)
}

impl VideoSource for ApproachSequence {
    fn video_id(&self) -> &str {
        &self.spec.video_id
    }

    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        if index >= self.frames.len() {
            return Err(Error::MissingAnnotation { frame: index });
        }
        Ok(self.render(index))
    }
}

impl PerceptionOracle for ApproachSequence {
    fn annotate(&self, frame: usize) -> Result<FrameAnnotation> {
        let s = self
            .frames
            .get(frame)
            .ok_or(Error::MissingAnnotation { frame })?;
        let visible = self.hand_visible(frame);
        Ok(FrameAnnotation {
            frame_index: frame,
            right_hand: visible.then(|| HandDetection {
                mask: s.hand.clone(),
                contact_confidence: s.confidence,
            }),
            left_hand: None,
            object_mask: Some(s.object.clone()),
            right_hand_count: usize::from(visible),
        })
    }

    fn hand_observation(&self, frame: usize) -> Result<HandObservation> {
        let s = self
            .frames
            .get(frame)
            .ok_or(Error::MissingAnnotation { frame })?;
        Ok(HandObservation {
            pose: self.pose.clone(),
            thumb_tip: s.thumb,
            index_tip: s.index,
        })
    }

    fn track_backward(
        &self,
        points: &[Point2D],
        from_frame: usize,
        num_frames: usize,
    ) -> Result<Vec<Vec<Point2D>>> {
        if num_frames > from_frame {
            return Err(Error::MissingAnnotation { frame: 0 });
        }
        Ok((1..=num_frames)
            .map(|step| {
                points
                    .iter()
                    .map(|p| self.tracked(*p, from_frame, from_frame - step))
                    .collect()
            })
            .collect())
    }
}

/// Mix of outcomes in a generated approach corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusMix {
    pub ok: usize,
    pub timeout: usize,
    pub degenerate: usize,
    pub ratio: usize,
}

/// The 20-video corpus: every rejection path is exercised.
impl Default for CorpusMix {
    fn default() -> Self {
        Self {
            ok: 14,
            timeout: 2,
            degenerate: 2,
            ratio: 2,
        }
    }
}

impl CorpusMix {
    pub fn total(&self) -> usize {
        self.ok + self.timeout + self.degenerate + self.ratio
    }
}

/// Scene specs whose ground-truth statuses follow `mix`, interleaved in a seeded order.
pub fn approach_corpus_specs(mix: CorpusMix, seed: u64) -> Vec<SynthSceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<EventStatus> = std::iter::repeat_n(EventStatus::Ok, mix.ok)
        .chain(std::iter::repeat_n(EventStatus::DiscardedTimeout, mix.timeout))
        .chain(std::iter::repeat_n(EventStatus::DiscardedDegenerateMask, mix.degenerate))
        .chain(std::iter::repeat_n(EventStatus::DiscardedRatio, mix.ratio))
        .collect();
    use rand::seq::SliceRandom;
    kinds.shuffle(&mut rng);
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            // A drawn scene can land on a different status than intended (fingertips
            // that straddle a corner of the eroded mask, or miss it), so redraw
            // until the ground truth agrees.
            let mut spec = draw_scene(i, kind, seed, &mut rng);
            for _ in 0..MAX_SCENE_REDRAWS {
                match ApproachSequence::generate(spec.clone()) {
                    Ok(seq) if seq.ground_truth().status == kind => break,
                    _ => spec = draw_scene(i, kind, seed, &mut rng),
                }
            }
            spec
        })
        .collect()
}

const MAX_SCENE_REDRAWS: usize = 32;

fn draw_scene(i: usize, kind: EventStatus, seed: u64, rng: &mut ChaCha8Rng) -> SynthSceneSpec {
    // Near-axis approaches for every kind but the ratio rejection: the
    // L1-eroded disk has corners on the diagonals, and fingertips
    // approaching a corner collapse onto it.
    let axis = 90.0 * rng.random_range(0..4) as f64;
    let angle = if kind == EventStatus::DiscardedRatio {
        axis + 45.0 + rng.random_range(-2.0..2.0)
    } else {
        axis + rng.random_range(-12.0..12.0)
    };
    let a = f64::to_radians(angle);
    let mut spec = SynthSceneSpec {
        video_id: format!("synth-{i:03}"),
        approach_angle_deg: angle,
        // Object sits downstream of the approach so the hand starts inside the frame.
        object_center: [
            112.0 + 35.0 * a.cos() + rng.random_range(-8.0..8.0),
            112.0 + 35.0 * a.sin() + rng.random_range(-8.0..8.0),
        ],
        object_color: [
            rng.random_range(20..120),
            rng.random_range(60..160),
            rng.random_range(150..250),
        ],
        finger_spread: rng.random_range(4.0..7.0),
        speed: rng.random_range(2.5..4.0),
        start_gap: rng.random_range(95.0..110.0),
        seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
        ..SynthSceneSpec::default()
    };
    match kind {
        EventStatus::Ok => {
            spec.object = if i % 4 == 3 {
                ObjectShape::Rect {
                    half_width: rng.random_range(22.0..30.0),
                    half_height: rng.random_range(22.0..30.0),
                }
            } else {
                ObjectShape::Disk {
                    radius: rng.random_range(22.0..32.0),
                }
            };
            if i % 5 == 1 {
                spec.object_drift = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            }
            if i % 7 == 2 {
                // Hand pops in at the contact frame.
                spec.start_gap = spec.speed * 3.0;
                spec.hand_visible_from = 3;
            }
        }
        EventStatus::DiscardedTimeout => {
            spec.object = ObjectShape::Disk {
                radius: rng.random_range(22.0..30.0),
            };
            spec.hover = Some(Hover {
                gap: rng.random_range(10.0..25.0),
                frames: 50 + rng.random_range(0..10),
            });
        }
        EventStatus::DiscardedDegenerateMask => {
            spec.object = ObjectShape::Disk {
                radius: rng.random_range(8.0..11.0),
            };
            spec.finger_spread = 3.0;
        }
        EventStatus::DiscardedRatio => {
            spec.object = ObjectShape::Disk {
                radius: rng.random_range(24.0..30.0),
            };
            spec.finger_spread = 4.0;
        }
    }
    spec
}

/// Parameters of a prototype-plus-noise pose corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPoseSpec {
    pub num_prototypes: usize,
    /// Per-coordinate Gaussian noise standard deviation.
    pub noise_std: f64,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for SynthPoseSpec {
    fn default() -> Self {
        Self {
            num_prototypes: 50,
            noise_std: 0.02,
            corpus_size: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseCorpus {
    pub prototypes: Vec<HandPose>,
    /// Prototype index of each pose.
    pub assignments: Vec<usize>,
    pub poses: Vec<HandPose>,
}

/// A plausible 21-joint hand: wrist at the origin, five fingers of four
/// joints, each finger curled by its own seeded angle.
fn prototype_pose(rng: &mut ChaCha8Rng) -> HandPose {
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    let spread = [-0.9f64, -0.35, 0.0, 0.3, 0.6];
    let bone = [[0.25, 0.2, 0.15, 0.12], [0.4, 0.25, 0.18, 0.15], [0.42, 0.28, 0.2, 0.16], [0.4, 0.26, 0.18, 0.15], [0.36, 0.2, 0.15, 0.12]];
    let wrist_tilt = rng.random_range(-0.4..0.4);
    for f in 0..5 {
        let yaw = spread[f] + rng.random_range(-0.15..0.15) + wrist_tilt;
        let curl = rng.random_range(0.0..1.3);
        let mut pos = [0.0f64; 3];
        let mut pitch = 0.0f64;
        for j in 0..4 {
            pitch += if j == 0 { rng.random_range(-0.2..0.2) } else { curl };
            let len = bone[f][j];
            pos[0] += len * pitch.cos() * yaw.cos();
            pos[1] += len * pitch.cos() * yaw.sin();
            pos[2] += len * pitch.sin();
            joints[1 + f * 4 + j] = pos;
        }
    }
    HandPose::new(joints).expect("finite by construction")
}

fn pose_for_seed(seed: u64) -> HandPose {
    prototype_pose(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_4A4D))
}

pub fn generate_pose_corpus(spec: &SynthPoseSpec) -> Result<PoseCorpus> {
    if spec.num_prototypes == 0 {
        return Err(Error::InvalidSpec("need at least one prototype".into()));
    }
    if !(spec.noise_std >= 0.0) || !spec.noise_std.is_finite() {
        return Err(Error::InvalidSpec("noise_std must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<HandPose> = (0..spec.num_prototypes)
        .map(|_| prototype_pose(&mut rng))
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).expect("valid std");
    let mut assignments = Vec::with_capacity(spec.corpus_size);
    let mut poses = Vec::with_capacity(spec.corpus_size);
    for i in 0..spec.corpus_size {
        let k = i % spec.num_prototypes;
        let flat: Vec<f64> = prototypes[k]
            .to_flat()
            .into_iter()
            .map(|v| if spec.noise_std > 0.0 { v + noise.sample(&mut rng) } else { v })
            .collect();
        assignments.push(k);
        poses.push(HandPose::from_flat(&flat)?);
    }
    Ok(PoseCorpus {
        prototypes,
        assignments,
        poses,
    })
}

/// Scene parameters for prior-training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSceneSpec {
    pub image_size: u32,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Bearing (degrees) of the thumb / index contact points around the object center.
    pub thumb_bearing_deg: f64,
    pub index_bearing_deg: f64,
    pub seed: u64,
}

impl Default for PriorSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_radius: 10.0,
            max_radius: 20.0,
            thumb_bearing_deg: 200.0,
            index_bearing_deg: 160.0,
            seed: 0,
        }
    }
}

/// Sidecar ground truth for one prior scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSceneTruth {
    pub sample_id: String,
    pub center: [f64; 2],
    pub radius: f64,
    pub pose_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorDataset {
    pub samples: Vec<(ManifestRecord, SampleImage)>,
    pub truth: Vec<PriorSceneTruth>,
}

/// Maps an object radius onto one of `k` hand-pose prototype buckets.
pub fn radius_bucket(spec: &PriorSceneSpec, radius: f64, k: usize) -> usize {
    let u = (radius - spec.min_radius) / (spec.max_radius - spec.min_radius).max(1e-9);
    ((u * k as f64).floor().max(0.0) as usize).min(k.saturating_sub(1))
}

/// Labelled single-object scenes. The hand pose is drawn from the corpus
/// poses whose prototype matches the object's size bucket, so the image
/// carries information about the grasp. `tokens` (if given) supplies each
/// pose's token sequence.
pub fn generate_prior_dataset(
    spec: &PriorSceneSpec,
    corpus: &PoseCorpus,
    tokenize: Option<&dyn Fn(&HandPose) -> Result<Vec<u32>>>,
    n: usize,
) -> Result<PriorDataset> {
    if spec.image_size < 8 || !(spec.min_radius > 0.0) || spec.max_radius < spec.min_radius {
        return Err(Error::InvalidSpec("bad prior scene parameters".into()));
    }
    if 2.0 * spec.max_radius + 2.0 >= spec.image_size as f64 {
        return Err(Error::InvalidSpec("objects do not fit in the image".into()));
    }
    if n > 0 && corpus.poses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let buckets = corpus.prototypes.len().clamp(1, 8);
    let mut by_bucket: Vec<Vec<usize>> = vec![Vec::new(); buckets];
    for (i, a) in corpus.assignments.iter().enumerate() {
        by_bucket[a % buckets].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size as f64;
    let mut out = PriorDataset::default();
    for i in 0..n {
        let radius = rng.random_range(spec.min_radius..=spec.max_radius);
        let margin = radius + 1.0;
        let cx = rng.random_range(margin..size - margin);
        let cy = rng.random_range(margin..size - margin);
        let color = [
            rng.random_range(30..120u8),
            rng.random_range(60..200u8),
            rng.random_range(140..255u8),
        ];
        let bg = rng.random_range(120..180u8);
        let mut img = RgbImage::new(spec.image_size, spec.image_size);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let p = Point2D::pixel_center(x as usize, y as usize);
            let jitter = rng.random_range(0..8u8);
            *px = if (p.x - cx).powi(2) + (p.y - cy).powi(2) <= radius * radius {
                Rgb(color)
            } else {
                Rgb([bg + jitter, bg + jitter, bg.saturating_sub(10) + jitter])
            };
        }
        let at = |deg: f64| {
            let a = deg.to_radians();
            [cx + radius * a.cos(), cy + radius * a.sin()]
        };
        let bucket = radius_bucket(spec, radius, buckets);
        let pool = if by_bucket[bucket].is_empty() {
            &by_bucket[0]
        } else {
            &by_bucket[bucket]
        };
        let pose_idx = pool[rng.random_range(0..pool.len().max(1))];
        let pose = corpus.poses[pose_idx].clone();
        let tokens = tokenize.map(|f| f(&pose)).transpose()?;
        let sample_id = format!("prior-{i:06}");
        out.truth.push(PriorSceneTruth {
            sample_id: sample_id.clone(),
            center: [cx, cy],
            radius,
            pose_index: pose_idx,
        });
        out.samples.push((
            ManifestRecord {
                image_path: format!("images/{sample_id}.png"),
                sample_id,
                video_id: "synthetic-prior".into(),
                contact_frame: i,
                prediction_frame: i,
                thumb_xy: at(spec.thumb_bearing_deg),
                index_xy: at(spec.index_bearing_deg),
                hand_pose: pose,
                tokens,
                status: EventStatus::Ok,
            },
            SampleImage(img),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_schedule_shapes() {
        let spec = SynthSceneSpec {
            start_gap: 10.0,
            speed: 3.0,
            ..Default::default()
        };
        assert_eq!(gap_schedule(&spec), vec![10.0, 7.0, 4.0, 1.0, 0.0]);
        let spec = SynthSceneSpec {
            start_gap: 10.0,
            speed: 3.0,
            hover: Some(Hover { gap: 5.0, frames: 2 }),
            ..Default::default()
        };
        assert_eq!(gap_schedule(&spec), vec![10.0, 7.0, 5.0, 5.0, 5.0, 2.0, 0.0]);
    }

    #[test]
    fn hand_entering_at_contact_gives_previous_frame() {
        let spec = SynthSceneSpec {
            start_gap: 6.0,
            speed: 3.0,
            hand_visible_from: 2,
            ..Default::default()
        };
        let seq = ApproachSequence::generate(spec).unwrap();
        let gt = seq.ground_truth();
        assert_eq!(gt.status, EventStatus::Ok);
        assert_eq!(gt.contact_frame, 2);
        assert_eq!(gt.prediction_frame, Some(1));
    }

    #[test]
    fn hovering_hand_times_out() {
        let spec = SynthSceneSpec {
            hover: Some(Hover { gap: 15.0, frames: 50 }),
            ..Default::default()
        };
        let seq = ApproachSequence::generate(spec).unwrap();
        assert_eq!(seq.ground_truth().status, EventStatus::DiscardedTimeout);
    }

    #[test]
    fn default_scene_is_ok_with_contact_on_eroded_object() {
        let seq = ApproachSequence::generate(SynthSceneSpec::default()).unwrap();
        let gt = seq.ground_truth();
        assert_eq!(gt.status, EventStatus::Ok);
        let fp = gt.prediction_frame.unwrap();
        assert!(fp < gt.contact_frame);
        let (a, b) = gt.contact_points_contact_frame.unwrap();
        let fc = seq.contact_frame();
        let eroded = brute_force_erode(&seq.frames[fc].object, GT_EROSION);
        assert!(eroded.get(a.x as i64, a.y as i64) && eroded.get(b.x as i64, b.y as i64));
        // Fingertips touch the object boundary at the contact frame.
        let c = Point2D::new(140.0, 112.0);
        assert!((seq.frames[fc].thumb.distance(&c) - 28.0).abs() < 1e-9);
    }

    #[test]
    fn corpus_statuses_follow_mix() {
        let mix = CorpusMix {
            ok: 14,
            timeout: 3,
            degenerate: 2,
            ratio: 1,
        };
        let specs = approach_corpus_specs(mix, 7);
        let mut counts = std::collections::BTreeMap::new();
        for s in specs {
            let seq = ApproachSequence::generate(s).unwrap();
            *counts.entry(seq.ground_truth().status).or_insert(0) += 1;
        }
        assert_eq!(counts.get(&EventStatus::Ok), Some(&14));
        assert_eq!(counts.get(&EventStatus::DiscardedTimeout), Some(&3));
        assert_eq!(counts.get(&EventStatus::DiscardedDegenerateMask), Some(&2));
        assert_eq!(counts.get(&EventStatus::DiscardedRatio), Some(&1));
    }

    #[test]
    fn pose_corpus_contract() {
        let spec = SynthPoseSpec {
            num_prototypes: 4,
            noise_std: 0.0,
            corpus_size: 12,
            seed: 3,
        };
        let c = generate_pose_corpus(&spec).unwrap();
        for (p, a) in c.poses.iter().zip(&c.assignments) {
            assert_eq!(p, &c.prototypes[*a]);
        }
        assert_eq!(c, generate_pose_corpus(&spec).unwrap());
        assert!(generate_pose_corpus(&SynthPoseSpec {
            num_prototypes: 0,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn pose_corpus_means_converge() {
        let spec = SynthPoseSpec {
            num_prototypes: 3,
            noise_std: 0.05,
            corpus_size: 3000,
            seed: 11,
        };
        let c = generate_pose_corpus(&spec).unwrap();
        for k in 0..3 {
            let members: Vec<Vec<f64>> = c
                .poses
                .iter()
                .zip(&c.assignments)
                .filter(|(_, a)| **a == k)
                .map(|(p, _)| p.to_flat())
                .collect();
            let n = members.len() as f64;
            let se = spec.noise_std / n.sqrt();
            let proto = c.prototypes[k].to_flat();
            for d in 0..63 {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / n;
                assert!((mean - proto[d]).abs() < 4.0 * se, "dim {d}");
            }
        }
    }

    #[test]
    fn prior_dataset_points_on_boundary_and_deterministic() {
        let corpus = generate_pose_corpus(&SynthPoseSpec {
            corpus_size: 200,
            ..Default::default()
        })
        .unwrap();
        let spec = PriorSceneSpec::default();
        assert!(generate_prior_dataset(&spec, &corpus, None, 0)
            .unwrap()
            .samples
            .is_empty());
        let a = generate_prior_dataset(&spec, &corpus, None, 40).unwrap();
        let b = generate_prior_dataset(&spec, &corpus, None, 40).unwrap();
        assert_eq!(a, b);
        for ((r, img), t) in a.samples.iter().zip(&a.truth) {
            let c = Point2D::new(t.center[0], t.center[1]);
            for p in [r.thumb_xy, r.index_xy] {
                let d = Point2D::new(p[0], p[1]).distance(&c);
                assert!((d - t.radius).abs() <= 0.5);
            }
            // The object is drawn where the truth says it is.
            let px = img.0.get_pixel(c.x as u32, c.y as u32);
            let inner = img.0.get_pixel((c.x + t.radius * 0.5) as u32, c.y as u32);
            assert_eq!(px, inner);
        }
    }
}
