//! Line-delimited JSON manifest shared by extracted and synthetic datasets.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{EventStatus, HandPose};
use crate::geometry::Point2D;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub video_id: String,
    pub contact_frame: usize,
    pub prediction_frame: usize,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub thumb_xy: [f64; 2],
    pub index_xy: [f64; 2],
    pub hand_pose: HandPose,
    /// Filled in once a tokenizer has been trained.
    pub tokens: Option<Vec<u32>>,
    pub status: EventStatus,
}

impl ManifestRecord {
    pub fn contact_points(&self) -> (Point2D, Point2D) {
        (
            Point2D::new(self.thumb_xy[0], self.thumb_xy[1]),
            Point2D::new(self.index_xy[0], self.index_xy[1]),
        )
    }
}

/// RGB image attached to a record before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleImage(pub RgbImage);

pub fn write_records(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes `<dir>/manifest.jsonl` and every image as a lossless PNG.
pub fn write_dataset(dir: &Path, samples: &[(ManifestRecord, SampleImage)]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for (record, img) in samples {
        let path = dir.join(&record.image_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.0.save(&path)?;
    }
    let records: Vec<ManifestRecord> = samples.iter().map(|(r, _)| r.clone()).collect();
    let manifest = dir.join(MANIFEST_FILE);
    write_records(&manifest, &records)?;
    Ok(manifest)
}

/// A manifest loaded together with its images.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<RgbImage>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_samples(samples: Vec<(ManifestRecord, SampleImage)>) -> Self {
        let (records, images) = samples.into_iter().map(|(r, i)| (r, i.0)).unzip();
        Self { records, images }
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let records = read_records(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let images = records
            .iter()
            .map(|r| Ok(image::open(base.join(&r.image_path))?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, images })
    }

    /// Deterministic split: every `k`-th record goes to the second half.
    pub fn split_every(&self, k: usize) -> (LoadedDataset, LoadedDataset) {
        let mut a = LoadedDataset {
            records: vec![],
            images: vec![],
        };
        let mut b = a.clone();
        for (i, (r, img)) in self.records.iter().zip(&self.images).enumerate() {
            let dst = if k > 0 && i % k == k - 1 { &mut b } else { &mut a };
            dst.records.push(r.clone());
            dst.images.push(img.clone());
        }
        (a, b)
    }
}
