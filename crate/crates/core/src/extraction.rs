//! Supervision extraction from annotated frame sequences.
//!
//! The pipeline per video: find the first frame of every qualifying
//! right-hand contact run, project the thumb/index fingertips onto the eroded
//! object mask, then track the projected points backwards until the dilated
//! hand mask no longer contains either point. That earlier frame becomes the
//! model input; the tracked points there are the contact targets.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dilate, distance_ratio_gate, erode, mask_contains, project_point_to_mask, BinaryMask, Point2D,
    StructuringElement, DEFAULT_RATIO_HI, DEFAULT_RATIO_LO,
};
use crate::manifest::{ManifestRecord, SampleImage};

pub const NUM_JOINTS: usize = 21;
pub const POSE_DIM: usize = NUM_JOINTS * 3;

/// 21 wrist-relative joints, 3 coordinates each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HandPose {
    joints: [[f64; 3]; NUM_JOINTS],
}

impl HandPose {
    pub fn new(joints: [[f64; 3]; NUM_JOINTS]) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { joints })
    }

    pub fn zeros() -> Self {
        Self {
            joints: [[0.0; 3]; NUM_JOINTS],
        }
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(Error::shape(POSE_DIM, values.len()));
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, chunk) in values.chunks_exact(3).enumerate() {
            joints[j].copy_from_slice(chunk);
        }
        Self::new(joints)
    }

    pub fn joints(&self) -> &[[f64; 3]; NUM_JOINTS] {
        &self.joints
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    /// Mean Euclidean distance between corresponding joints.
    pub fn mean_joint_error(&self, other: &HandPose) -> f64 {
        self.joints
            .iter()
            .zip(&other.joints)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / NUM_JOINTS as f64
    }
}

impl TryFrom<Vec<f64>> for HandPose {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_flat(&v)
    }
}

impl From<HandPose> for Vec<f64> {
    fn from(p: HandPose) -> Self {
        p.to_flat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandDetection {
    pub mask: BinaryMask,
    pub contact_confidence: f64,
}

/// Segmenter output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub right_hand: Option<HandDetection>,
    pub left_hand: Option<HandDetection>,
    pub object_mask: Option<BinaryMask>,
    pub right_hand_count: usize,
}

/// Hand reconstruction for one frame: 3D pose plus the 2D fingertips used for contact labels.
#[derive(Debug, Clone, PartialEq)]
pub struct HandObservation {
    pub pose: HandPose,
    pub thumb_tip: Point2D,
    pub index_tip: Point2D,
}

/// Stands in for the segmentation, hand-reconstruction and point-tracking models.
pub trait PerceptionOracle {
    fn annotate(&self, frame: usize) -> Result<FrameAnnotation>;

    fn hand_observation(&self, frame: usize) -> Result<HandObservation>;

    /// Tracks `points` (given at `from_frame`) backwards over `num_frames`
    /// frames. Entry `i` holds the positions at frame `from_frame - 1 - i`.
    fn track_backward(
        &self,
        points: &[Point2D],
        from_frame: usize,
        num_frames: usize,
    ) -> Result<Vec<Vec<Point2D>>>;
}

/// Provides decoded RGB frames of one video.
pub trait VideoSource {
    fn video_id(&self) -> &str;
    fn num_frames(&self) -> usize;
    fn frame(&self, index: usize) -> Result<RgbImage>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Ok,
    DiscardedRatio,
    DiscardedTimeout,
    DiscardedDegenerateMask,
}

impl EventStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventStatus::Ok => "ok",
            EventStatus::DiscardedRatio => "discarded_ratio",
            EventStatus::DiscardedTimeout => "discarded_timeout",
            EventStatus::DiscardedDegenerateMask => "discarded_degenerate_mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactEvent {
    pub video_id: String,
    pub contact_frame: usize,
    /// Set only when the backward search found a frame.
    pub prediction_frame: Option<usize>,
    /// Thumb then index, at the contact frame.
    pub contact_points_contact_frame: Option<(Point2D, Point2D)>,
    /// Thumb then index, at the prediction frame.
    pub contact_points_prediction_frame: Option<(Point2D, Point2D)>,
    pub hand_pose: Option<HandPose>,
    pub status: EventStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub confidence_threshold: f64,
    pub erosion_iterations: usize,
    pub hand_dilation_iterations: usize,
    pub max_lookback: usize,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub num_query_points: usize,
    pub element: StructuringElement,
    /// Side length of the square images written to the manifest.
    pub image_size: u32,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.9,
            erosion_iterations: 12,
            hand_dilation_iterations: 75,
            max_lookback: 45,
            ratio_lo: DEFAULT_RATIO_LO,
            ratio_hi: DEFAULT_RATIO_HI,
            num_query_points: 10,
            element: StructuringElement::Cross4,
            image_size: 128,
            seed: 0,
        }
    }
}

fn in_contact(hand: &Option<HandDetection>, threshold: f64) -> bool {
    hand.as_ref()
        .is_some_and(|h| h.contact_confidence >= threshold)
}

fn qualifies(a: &FrameAnnotation, threshold: f64) -> bool {
    a.right_hand_count == 1
        && in_contact(&a.right_hand, threshold)
        && !in_contact(&a.left_hand, threshold)
}

/// First frame of every maximal run of frames with exactly one right hand in
/// confident contact and no left hand in confident contact.
pub fn identify_contact_frames(annotations: &[FrameAnnotation], confidence_threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<(usize, bool)> = None;
    for a in annotations {
        let q = qualifies(a, confidence_threshold);
        // A gap in frame indices ends the run.
        let continues = matches!(prev, Some((idx, true)) if idx + 1 == a.frame_index);
        if q && !continues {
            out.push(a.frame_index);
        }
        prev = Some((a.frame_index, q));
    }
    out
}

/// Contact-frame labels: projected fingertips and the hand pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactLabels {
    pub points: (Point2D, Point2D),
    pub fingertips: (Point2D, Point2D),
    pub hand_pose: HandPose,
    pub eroded_object: BinaryMask,
}

/// Projects the fingertips onto the eroded object mask, applying the spacing-ratio gate.
pub fn extract_contact_labels(
    annotation: &FrameAnnotation,
    oracle: &dyn PerceptionOracle,
    config: &ExtractionConfig,
) -> Result<std::result::Result<ContactLabels, EventStatus>> {
    let Some(object) = annotation.object_mask.as_ref() else {
        return Ok(Err(EventStatus::DiscardedDegenerateMask));
    };
    let eroded = erode(object, config.erosion_iterations, config.element);
    let hand = oracle.hand_observation(annotation.frame_index)?;
    let fingertips = (hand.thumb_tip, hand.index_tip);
    let project = |p| match project_point_to_mask(p, &eroded) {
        Ok(q) => Ok(Some(q)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    };
    let (Some(thumb), Some(index)) = (project(fingertips.0)?, project(fingertips.1)?) else {
        return Ok(Err(EventStatus::DiscardedDegenerateMask));
    };
    if !distance_ratio_gate(fingertips, (thumb, index), config.ratio_lo, config.ratio_hi) {
        return Ok(Err(EventStatus::DiscardedRatio));
    }
    Ok(Ok(ContactLabels {
        points: (thumb, index),
        fingertips,
        hand_pose: hand.pose,
        eroded_object: eroded,
    }))
}

/// Spread-out tracker query points: greedy farthest-point selection over
/// foreground pixel centers, starting from the pixel nearest the centroid.
/// Distance ties go to the first pixel in row-major order, so the selection
/// is deterministic and `_seed` does not change it.
pub fn sample_query_points(mask: &BinaryMask, n: usize, _seed: u64) -> Result<Vec<Point2D>> {
    let pixels: Vec<Point2D> = mask
        .foreground()
        .map(|(x, y)| Point2D::pixel_center(x, y))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    if pixels.len() <= n {
        return Ok(pixels);
    }
    let count = pixels.len() as f64;
    let centroid = Point2D::new(
        pixels.iter().map(|p| p.x).sum::<f64>() / count,
        pixels.iter().map(|p| p.y).sum::<f64>() / count,
    );
    let mut first = 0;
    for (i, p) in pixels.iter().enumerate() {
        if p.distance_sq(&centroid) < pixels[first].distance_sq(&centroid) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = pixels.iter().map(|p| p.distance_sq(&pixels[first])).collect();
    while chosen.len() < n {
        let mut next = 0;
        for (i, d) in nearest.iter().enumerate() {
            if *d > nearest[next] {
                next = i;
            }
        }
        chosen.push(next);
        for (i, p) in pixels.iter().enumerate() {
            nearest[i] = nearest[i].min(p.distance_sq(&pixels[next]));
        }
    }
    Ok(chosen.into_iter().map(|i| pixels[i]).collect())
}

/// Outcome of the backward search for the prediction frame.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionFrameSearch {
    Found {
        frame: usize,
        points: (Point2D, Point2D),
    },
    Timeout,
}

/// Walks back from `contact_frame`; the first earlier frame whose dilated
/// right-hand mask contains neither tracked contact point is the prediction
/// frame. A frame without a detected right hand qualifies immediately.
pub fn find_prediction_frame(
    contact_frame: usize,
    contact_points: (Point2D, Point2D),
    query_points: &[Point2D],
    oracle: &dyn PerceptionOracle,
    config: &ExtractionConfig,
) -> Result<PredictionFrameSearch> {
    let lookback = config.max_lookback.min(contact_frame);
    if lookback == 0 {
        return Ok(PredictionFrameSearch::Timeout);
    }
    let mut seeds = vec![contact_points.0, contact_points.1];
    seeds.extend_from_slice(query_points);
    let tracks = oracle.track_backward(&seeds, contact_frame, lookback)?;
    if tracks.len() != lookback {
        return Err(Error::shape(
            format!("{lookback} tracked frames"),
            tracks.len(),
        ));
    }
    for (step, tracked) in tracks.iter().enumerate() {
        let frame = contact_frame - 1 - step;
        if tracked.len() < 2 {
            return Err(Error::shape("at least 2 tracked points", tracked.len()));
        }
        let points = (tracked[0], tracked[1]);
        let annotation = oracle.annotate(frame)?;
        let hand_absent = match &annotation.right_hand {
            None => true,
            Some(hand) => {
                let grown = dilate(&hand.mask, config.hand_dilation_iterations, config.element);
                !mask_contains(&grown, points.0) && !mask_contains(&grown, points.1)
            }
        };
        if hand_absent {
            return Ok(PredictionFrameSearch::Found { frame, points });
        }
    }
    Ok(PredictionFrameSearch::Timeout)
}

/// Runs the full per-video extraction and returns one event per contact frame.
pub fn extract_video_events(
    video_id: &str,
    num_frames: usize,
    oracle: &dyn PerceptionOracle,
    config: &ExtractionConfig,
) -> Result<Vec<ContactEvent>> {
    let annotations = (0..num_frames)
        .map(|i| oracle.annotate(i))
        .collect::<Result<Vec<_>>>()?;
    let mut events = Vec::new();
    for contact_frame in identify_contact_frames(&annotations, config.confidence_threshold) {
        let mut event = ContactEvent {
            video_id: video_id.to_string(),
            contact_frame,
            prediction_frame: None,
            contact_points_contact_frame: None,
            contact_points_prediction_frame: None,
            hand_pose: None,
            status: EventStatus::Ok,
        };
        let labels = match extract_contact_labels(&annotations[contact_frame], oracle, config)? {
            Ok(l) => l,
            Err(status) => {
                event.status = status;
                events.push(event);
                continue;
            }
        };
        event.contact_points_contact_frame = Some(labels.points);
        event.hand_pose = Some(labels.hand_pose.clone());
        let query = sample_query_points(
            &labels.eroded_object,
            config.num_query_points,
            config.seed ^ contact_frame as u64,
        )?;
        match find_prediction_frame(contact_frame, labels.points, &query, oracle, config)? {
            PredictionFrameSearch::Found { frame, points } => {
                event.prediction_frame = Some(frame);
                event.contact_points_prediction_frame = Some(points);
            }
            PredictionFrameSearch::Timeout => event.status = EventStatus::DiscardedTimeout,
        }
        events.push(event);
    }
    Ok(events)
}

/// One video as seen by the dataset builder.
pub struct VideoInput<'a> {
    pub source: &'a dyn VideoSource,
    pub oracle: &'a dyn PerceptionOracle,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub videos: usize,
    pub failed_videos: Vec<String>,
    pub candidates: usize,
    pub status_counts: BTreeMap<EventStatus, usize>,
}

impl ExtractionSummary {
    pub fn count(&self, status: EventStatus) -> usize {
        self.status_counts.get(&status).copied().unwrap_or(0)
    }
}

pub struct DatasetBuild {
    pub samples: Vec<(ManifestRecord, SampleImage)>,
    pub events: Vec<ContactEvent>,
    pub summary: ExtractionSummary,
}

/// Builds training records from every `ok` event across `videos`, ordered by
/// video id then contact frame. A failing video is logged and skipped.
pub fn build_dataset(videos: &[VideoInput<'_>], config: &ExtractionConfig) -> DatasetBuild {
    let mut order: Vec<&VideoInput<'_>> = videos.iter().collect();
    order.sort_by(|a, b| a.source.video_id().cmp(b.source.video_id()));

    let mut summary = ExtractionSummary::default();
    for s in [
        EventStatus::Ok,
        EventStatus::DiscardedRatio,
        EventStatus::DiscardedTimeout,
        EventStatus::DiscardedDegenerateMask,
    ] {
        summary.status_counts.insert(s, 0);
    }
    let mut samples = Vec::new();
    let mut all_events = Vec::new();
    for video in order {
        summary.videos += 1;
        let id = video.source.video_id();
        let result = extract_video_events(id, video.source.num_frames(), video.oracle, config)
            .and_then(|events| {
                let mut built = Vec::new();
                for e in events.iter().filter(|e| e.status == EventStatus::Ok) {
                    built.push(make_sample(video.source, e, config)?);
                }
                Ok((events, built))
            });
        match result {
            Ok((events, built)) => {
                for e in &events {
                    summary.candidates += 1;
                    *summary.status_counts.entry(e.status).or_default() += 1;
                }
                samples.extend(built);
                all_events.extend(events);
            }
            Err(err) => {
                log::warn!("video {id}: extraction failed: {err}");
                summary.failed_videos.push(id.to_string());
            }
        }
    }
    for (status, count) in &summary.status_counts {
        log::info!("{}: {count}", status.as_str());
    }
    DatasetBuild {
        samples,
        events: all_events,
        summary,
    }
}

fn make_sample(
    source: &dyn VideoSource,
    event: &ContactEvent,
    config: &ExtractionConfig,
) -> Result<(ManifestRecord, SampleImage)> {
    let frame = event.prediction_frame.expect("ok event has a prediction frame");
    let (thumb, index) = event
        .contact_points_prediction_frame
        .expect("ok event has points");
    let img = source.frame(frame)?;
    let (w, h) = img.dimensions();
    let size = config.image_size;
    let resized = if (w, h) == (size, size) {
        img
    } else {
        image::imageops::resize(&img, size, size, image::imageops::FilterType::Triangle)
    };
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    let scale = |p: Point2D| [p.x * sx, p.y * sy];
    let sample_id = format!("{}-{:06}", event.video_id, event.contact_frame);
    let record = ManifestRecord {
        image_path: format!("images/{sample_id}.png"),
        sample_id,
        video_id: event.video_id.clone(),
        contact_frame: event.contact_frame,
        prediction_frame: frame,
        thumb_xy: scale(thumb),
        index_xy: scale(index),
        hand_pose: event.hand_pose.clone().expect("ok event has a pose"),
        tokens: None,
        status: EventStatus::Ok,
    };
    Ok((record, SampleImage(resized)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2D;

    fn annotation(i: usize, right: Option<f64>, left: Option<f64>, count: usize) -> FrameAnnotation {
        let mask = BinaryMask::full(4, 4);
        FrameAnnotation {
            frame_index: i,
            right_hand: right.map(|c| HandDetection {
                mask: mask.clone(),
                contact_confidence: c,
            }),
            left_hand: left.map(|c| HandDetection {
                mask: mask.clone(),
                contact_confidence: c,
            }),
            object_mask: Some(mask),
            right_hand_count: count,
        }
    }

    #[test]
    fn contact_frames_first_of_run() {
        let a: Vec<_> = [0.5, 0.95, 0.96]
            .iter()
            .enumerate()
            .map(|(i, c)| annotation(i, Some(*c), None, 1))
            .collect();
        assert_eq!(identify_contact_frames(&a, 0.9), vec![1]);
    }

    #[test]
    fn contact_frames_exclusions() {
        let a = vec![
            annotation(0, Some(0.95), Some(0.92), 1),
            annotation(1, Some(0.95), None, 2),
            annotation(2, Some(0.95), Some(0.5), 1),
            annotation(3, Some(0.97), None, 1),
            annotation(4, Some(0.2), None, 1),
            annotation(5, Some(0.91), None, 1),
            annotation(6, None, None, 0),
        ];
        assert_eq!(identify_contact_frames(&a, 0.9), vec![2, 5]);
        assert!(identify_contact_frames(&[], 0.9).is_empty());
    }

    #[test]
    fn contact_frames_boundary_confidence() {
        let a = vec![annotation(0, Some(0.9), Some(0.89999), 1)];
        assert_eq!(identify_contact_frames(&a, 0.9), vec![0]);
    }

    #[test]
    fn query_points_small_masks() {
        let mut m = BinaryMask::new(8, 8);
        for (x, y) in [(1, 1), (5, 2), (3, 7)] {
            m.set(x, y, true);
        }
        let pts = sample_query_points(&m, 10, 4).unwrap();
        assert_eq!(
            pts,
            vec![
                Point2D::new(1.5, 1.5),
                Point2D::new(5.5, 2.5),
                Point2D::new(3.5, 7.5)
            ]
        );
        let ten = BinaryMask::from_fn(10, 2, |_, y| y == 1);
        let pts = sample_query_points(&ten, 10, 1).unwrap();
        assert_eq!(pts.len(), 10);
        assert_eq!(pts, sample_query_points(&ten, 10, 1).unwrap());
        assert!(matches!(
            sample_query_points(&BinaryMask::new(3, 3), 10, 0),
            Err(Error::EmptyMask)
        ));
    }

    fn greedy_oracle(mask: &BinaryMask, n: usize) -> f64 {
        // Naive re-implementation; reports the minimum pairwise distance of the chosen set.
        let px: Vec<(f64, f64)> = mask
            .foreground()
            .map(|(x, y)| (x as f64 + 0.5, y as f64 + 0.5))
            .collect();
        let cx = px.iter().map(|p| p.0).sum::<f64>() / px.len() as f64;
        let cy = px.iter().map(|p| p.1).sum::<f64>() / px.len() as f64;
        let mut start = 0;
        for i in 0..px.len() {
            let d = |j: usize| (px[j].0 - cx).powi(2) + (px[j].1 - cy).powi(2);
            if d(i) < d(start) {
                start = i;
            }
        }
        let mut set = vec![px[start]];
        while set.len() < n {
            let mut best = (0usize, -1.0f64);
            for (i, p) in px.iter().enumerate() {
                let m = set
                    .iter()
                    .map(|s| ((p.0 - s.0).powi(2) + (p.1 - s.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                if m > best.1 {
                    best = (i, m);
                }
            }
            set.push(px[best.0]);
        }
        let mut min = f64::INFINITY;
        for i in 0..set.len() {
            for j in 0..i {
                min = min.min(((set[i].0 - set[j].0).powi(2) + (set[i].1 - set[j].1).powi(2)).sqrt());
            }
        }
        min
    }

    #[test]
    fn query_points_match_greedy_oracle_spread() {
        let disk = BinaryMask::from_fn(64, 64, |x, y| {
            (x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 30.0).powi(2) <= 20.0f64.powi(2)
        });
        let pts = sample_query_points(&disk, 10, 17).unwrap();
        assert_eq!(pts.len(), 10);
        let mut min = f64::INFINITY;
        for i in 0..pts.len() {
            for j in 0..i {
                assert_ne!(pts[i], pts[j]);
                min = min.min(pts[i].distance(&pts[j]));
            }
        }
        assert!((min - greedy_oracle(&disk, 10)).abs() < 1e-9);
        assert_eq!(pts, sample_query_points(&disk, 10, 17).unwrap());
    }

    #[test]
    fn hand_pose_flat_round_trip_and_errors() {
        let flat: Vec<f64> = (0..63).map(|i| i as f64 * 0.1).collect();
        let p = HandPose::from_flat(&flat).unwrap();
        assert_eq!(p.to_flat(), flat);
        assert!(HandPose::from_flat(&flat[..60]).is_err());
        let mut bad = flat.clone();
        bad[5] = f64::NAN;
        assert!(matches!(HandPose::from_flat(&bad), Err(Error::NonFiniteInput)));
        assert_eq!(p.mean_joint_error(&p), 0.0);
    }
}
