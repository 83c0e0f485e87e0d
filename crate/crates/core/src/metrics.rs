//! Trajectory-control metrics of detected objects against their input box tracks.
//!
//! * mIoU: per-frame IoU averaged over all frames; a missing detection scores 0.
//! * CD: mean distance between detected and input box centers over frames with
//!   a detection; undefined when nothing was detected.
//! * Cov: fraction of videos in which every object is detected in strictly more
//!   than half of the frames.
//! * AP50: all-point average precision over the pooled per-frame detections,
//!   a true positive being IoU ≥ 0.5 with that frame's input box.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::{BBox, BBoxTrack};

pub const AP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub confidence: T,
}

/// Best detection of one object in each frame of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTrack<T> {
    pub video: String,
    /// 1-based object (layer) number.
    pub object: usize,
    pub frames: Vec<Option<Detection<T>>>,
}

impl<T: Real> DetectionTrack<T> {
    pub fn empty(video: impl Into<String>, object: usize, frames: usize) -> Self {
        DetectionTrack {
            video: video.into(),
            object,
            frames: vec![None; frames],
        }
    }

    /// Every frame detected exactly on the track with the given confidence.
    pub fn from_track(video: impl Into<String>, object: usize, track: &BBoxTrack<T>, confidence: T) -> Self {
        DetectionTrack {
            video: video.into(),
            object,
            frames: track
                .boxes
                .iter()
                .map(|&bbox| Some(Detection { bbox, confidence }))
                .collect(),
        }
    }

    pub fn detected_frames(&self) -> usize {
        self.frames.iter().filter(|d| d.is_some()).count()
    }
}

pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(T::zero());
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

fn check_len<T: Real>(pred: &DetectionTrack<T>, gt: &BBoxTrack<T>) -> Result<()> {
    if pred.frames.len() != gt.frames() {
        return Err(Error::Shape(format!(
            "detections for video {:?} object {} cover {} frames, track has {}",
            pred.video,
            pred.object,
            pred.frames.len(),
            gt.frames()
        )));
    }
    Ok(())
}

pub fn miou_track<T: Real>(pred: &DetectionTrack<T>, gt: &BBoxTrack<T>) -> Result<T> {
    check_len(pred, gt)?;
    if gt.frames() == 0 {
        return Ok(T::zero());
    }
    let total: T = pred
        .frames
        .iter()
        .zip(&gt.boxes)
        .map(|(d, g)| d.map_or(T::zero(), |d| iou(&d.bbox, g)))
        .sum();
    Ok(total / T::lit(gt.frames() as f64))
}

/// Mean center distance over detected frames; `None` if no frame has a detection.
pub fn centroid_distance<T: Real>(pred: &DetectionTrack<T>, gt: &BBoxTrack<T>) -> Result<Option<T>> {
    check_len(pred, gt)?;
    let dists: Vec<T> = pred
        .frames
        .iter()
        .zip(&gt.boxes)
        .filter_map(|(d, g)| {
            d.map(|d| {
                let (ax, ay) = d.bbox.center();
                let (bx, by) = g.center();
                (ax - bx).hypot(ay - by)
            })
        })
        .collect();
    if dists.is_empty() {
        return Ok(None);
    }
    let n = T::lit(dists.len() as f64);
    Ok(Some(dists.into_iter().sum::<T>() / n))
}

/// Fraction of videos whose objects are all detected in more than half their frames.
pub fn coverage<T: Real>(tracks: &[DetectionTrack<T>]) -> Result<T> {
    if tracks.is_empty() {
        return Err(Error::Invalid("coverage needs at least one track".into()));
    }
    let mut covered: BTreeMap<&str, bool> = BTreeMap::new();
    for t in tracks {
        // strict majority: 2·detected > f
        let ok = 2 * t.detected_frames() > t.frames.len();
        let entry = covered.entry(t.video.as_str()).or_insert(true);
        *entry &= ok;
    }
    let n = covered.values().filter(|&&c| c).count();
    Ok(T::lit(n as f64) / T::lit(covered.len() as f64))
}

/// AP at IoU 0.5 over all pairs `(preds[k], gts[k])`.
pub fn ap50<T: Real>(preds: &[DetectionTrack<T>], gts: &[BBoxTrack<T>]) -> Result<T> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection tracks paired with {} input tracks",
            preds.len(),
            gts.len()
        )));
    }
    let threshold = T::lit(AP_IOU_THRESHOLD);
    // (confidence, pair, frame, iou)
    let mut pool: Vec<(T, usize, usize, T)> = Vec::new();
    let mut total_gt = 0usize;
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        check_len(p, g)?;
        total_gt += g.frames();
        for (fi, d) in p.frames.iter().enumerate() {
            if let Some(d) = d {
                pool.push((d.confidence, k, fi, iou(&d.bbox, &g.boxes[fi])));
            }
        }
    }
    if total_gt == 0 {
        return Ok(T::zero());
    }
    // stable: equal confidences keep pool order
    pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut matched: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut tp = 0usize;
    let mut points: Vec<(T, T)> = Vec::with_capacity(pool.len());
    for (rank, &(_, k, fi, overlap)) in pool.iter().enumerate() {
        if overlap >= threshold && matched.insert((k, fi)) {
            tp += 1;
        }
        let precision = T::lit(tp as f64) / T::lit((rank + 1) as f64);
        let recall = T::lit(tp as f64) / T::lit(total_gt as f64);
        points.push((recall, precision));
    }
    // precision envelope, right to left
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = T::zero();
    let mut prev_recall = T::zero();
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct ObjectMetrics<T> {
    pub video: String,
    pub object: usize,
    pub miou: T,
    pub cd: Option<T>,
    pub detected_frames: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct MetricsReport<T> {
    pub miou: T,
    pub ap50: T,
    pub coverage: T,
    /// `None` when no object was detected in any frame.
    pub cd: Option<T>,
    pub per_object: Vec<ObjectMetrics<T>>,
}

/// All four metrics over paired tracks. mIoU and CD average the per-object
/// values; objects without any detection are left out of CD.
pub fn evaluate<T: Real>(preds: &[DetectionTrack<T>], gts: &[BBoxTrack<T>]) -> Result<MetricsReport<T>> {
    let ap = ap50(preds, gts)?;
    let mut per_object = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        per_object.push(ObjectMetrics {
            video: p.video.clone(),
            object: p.object,
            miou: miou_track(p, g)?,
            cd: centroid_distance(p, g)?,
            detected_frames: p.detected_frames(),
            frames: p.frames.len(),
        });
    }
    let miou = if per_object.is_empty() {
        T::zero()
    } else {
        per_object.iter().map(|o| o.miou).sum::<T>() / T::lit(per_object.len() as f64)
    };
    let cds: Vec<T> = per_object.iter().filter_map(|o| o.cd).collect();
    let cd = (!cds.is_empty()).then(|| cds.iter().copied().sum::<T>() / T::lit(cds.len() as f64));
    let coverage = if preds.is_empty() {
        T::zero()
    } else {
        coverage(preds)?
    };
    Ok(MetricsReport {
        miou,
        ap50: ap,
        coverage,
        cd,
        per_object,
    })
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(deserialize = "T: Real"))]
pub struct DetectionRecord<T> {
    pub video: String,
    pub object: usize,
    /// 1-based.
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub confidence: T,
}

/// Parses newline-delimited JSON detections. Blank lines are skipped; errors
/// name the 1-based line number.
pub fn parse_detections<T: Real>(text: &str) -> Result<Vec<DetectionRecord<T>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let rec: DetectionRecord<T> = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            field: format!("line {line_no}: {}", e.path()),
            message: e.into_inner().to_string(),
        })?;
        let bad = |msg: String| Error::Parse {
            field: format!("line {line_no}"),
            message: msg,
        };
        if !rec.bbox.is_valid() {
            return Err(bad(format!("invalid box {:?}", rec.bbox.to_array())));
        }
        if !(rec.confidence >= T::zero() && rec.confidence <= T::one()) {
            return Err(bad(format!("confidence {} outside [0, 1]", rec.confidence)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_detections<T: Real>(path: &Path) -> Result<Vec<DetectionRecord<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

/// Video id assumed when a detection file names no video at all.
pub const DEFAULT_VIDEO: &str = "default";

/// Groups records into one track per (video, object) for `objects` objects of
/// `frames` frames. Objects absent from a video get an all-missing track; a
/// frame with several detections keeps the most confident.
pub fn build_tracks<T: Real>(
    records: &[DetectionRecord<T>],
    objects: usize,
    frames: usize,
) -> Result<Vec<DetectionTrack<T>>> {
    let mut videos: BTreeSet<&str> = records.iter().map(|r| r.video.as_str()).collect();
    if videos.is_empty() {
        videos.insert(DEFAULT_VIDEO);
    }
    let mut tracks: BTreeMap<(&str, usize), DetectionTrack<T>> = BTreeMap::new();
    for &v in &videos {
        for o in 1..=objects {
            tracks.insert((v, o), DetectionTrack::empty(v, o, frames));
        }
    }
    for r in records {
        if r.object < 1 || r.object > objects {
            return Err(Error::Range(format!(
                "detection object {} outside [1, {objects}]",
                r.object
            )));
        }
        if r.frame < 1 || r.frame > frames {
            return Err(Error::Range(format!(
                "detection frame {} outside [1, {frames}]",
                r.frame
            )));
        }
        let track = tracks.get_mut(&(r.video.as_str(), r.object)).expect("seeded above");
        let slot = &mut track.frames[r.frame - 1];
        let better = slot.is_none_or(|d| r.confidence > d.confidence);
        if better {
            *slot = Some(Detection {
                bbox: r.bbox,
                confidence: r.confidence,
            });
        }
    }
    Ok(tracks.into_values().collect())
}
