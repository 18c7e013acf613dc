//! Segmentation metrics: per-sample IoU, pooled and averaged IoU, precision
//! at IoU thresholds and its mean, in frame or video-tube mode.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};

/// P@τ thresholds reported in tables.
pub const REPORT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// 0.50:0.05:0.95.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(dim_err!("mask lengths differ: {} vs {}", pred.len(), gt.len()));
        }
        let mut o = Overlap::default();
        for (&p, &g) in pred.iter().zip(gt) {
            o.intersection += u64::from(p && g);
            o.union += u64::from(p || g);
        }
        Ok(o)
    }

    /// Empty union counts as a perfect match.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    fn add(self, o: Overlap) -> Overlap {
        Overlap { intersection: self.intersection + o.intersection, union: self.union + o.union }
    }
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

/// Overlap summed over all frames before dividing. `pred` and `gt` hold one
/// mask per frame.
pub fn tube_overlap(pred: &[&[bool]], gt: &[&[bool]]) -> Result<Overlap> {
    if pred.len() != gt.len() {
        return Err(dim_err!("tube lengths differ: {} vs {}", pred.len(), gt.len()));
    }
    pred.iter().zip(gt).try_fold(Overlap::default(), |acc, (p, g)| Ok(acc.add(Overlap::of(p, g)?)))
}

pub fn tube_iou(pred: &[&[bool]], gt: &[&[bool]]) -> Result<f64> {
    Ok(tube_overlap(pred, gt)?.iou())
}

/// `(overall, mean)`: pooled intersections over pooled unions, and the mean
/// of per-sample IoUs.
pub fn aggregate(overlaps: &[Overlap]) -> Result<(f64, f64)> {
    if overlaps.is_empty() {
        return Err(Error::Contract("no samples to aggregate".into()));
    }
    let total = overlaps.iter().fold(Overlap::default(), |a, &o| a.add(o));
    let mean = overlaps.iter().map(|o| o.iou()).sum::<f64>() / overlaps.len() as f64;
    Ok((total.iou(), mean))
}

/// Fraction of samples whose IoU is strictly above each threshold.
pub fn precision_curve(ious: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if ious.is_empty() {
        return Err(Error::Contract("no samples for precision".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64)
        .collect())
}

/// Mean of P@τ over 0.50:0.05:0.95.
pub fn map_over_thresholds(ious: &[f64]) -> Result<f64> {
    let p = precision_curve(ious, &map_thresholds())?;
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Every frame is a sample.
    #[default]
    Frame,
    /// Every video is a sample.
    Tube,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(EvalMode::Frame),
            "tube" => Ok(EvalMode::Tube),
            _ => Err(Error::Config(format!("unknown evaluation mode {s}"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Frame => "frame",
            EvalMode::Tube => "tube",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub ious: Vec<f64>,
    /// Aligned with [`REPORT_THRESHOLDS`].
    pub precision: Vec<f64>,
    pub map: f64,
    pub overall: f64,
    pub mean: f64,
}

impl MetricReport {
    pub fn from_overlaps(mode: EvalMode, overlaps: &[Overlap]) -> Result<Self> {
        let ious: Vec<f64> = overlaps.iter().map(|o| o.iou()).collect();
        let (overall, mean) = aggregate(overlaps)?;
        Ok(MetricReport {
            mode,
            precision: precision_curve(&ious, &REPORT_THRESHOLDS)?,
            map: map_over_thresholds(&ious)?,
            overall,
            mean,
            ious,
        })
    }

    /// Builds a report from per-video `[T * plane]` prediction and ground-truth
    /// masks.
    pub fn from_videos(mode: EvalMode, videos: &[(Vec<bool>, Vec<bool>)], frames: usize) -> Result<Self> {
        let mut overlaps = Vec::new();
        for (pred, gt) in videos {
            if pred.len() != gt.len() || frames == 0 || pred.len() % frames != 0 {
                return Err(dim_err!("video masks of {} / {} values for {frames} frames", pred.len(), gt.len()));
            }
            let plane = pred.len() / frames;
            let p: Vec<&[bool]> = pred.chunks(plane).collect();
            let g: Vec<&[bool]> = gt.chunks(plane).collect();
            match mode {
                EvalMode::Tube => overlaps.push(tube_overlap(&p, &g)?),
                EvalMode::Frame => {
                    for (a, b) in p.iter().zip(&g) {
                        overlaps.push(Overlap::of(a, b)?);
                    }
                }
            }
        }
        Self::from_overlaps(mode, &overlaps)
    }

    pub fn key_values(&self) -> String {
        let mut s = format!("mode={}\nsamples={}\n", self.mode, self.ious.len());
        for (t, p) in REPORT_THRESHOLDS.iter().zip(&self.precision) {
            s.push_str(&format!("P@{t:.1}={p:.6}\n"));
        }
        s.push_str(&format!("mAP={:.6}\nOverall={:.6}\nMean={:.6}\n", self.map, self.overall, self.mean));
        s
    }

    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (t, p) in REPORT_THRESHOLDS.iter().zip(&self.precision) {
            head.push_str(&format!("{:>8}", format!("P@{t:.1}")));
            row.push_str(&format!("{:>8.1}", 100.0 * p));
        }
        for (name, v) in [("mAP", self.map), ("Overall", self.overall), ("Mean", self.mean)] {
            head.push_str(&format!("{name:>9}"));
            row.push_str(&format!("{:>9.1}", 100.0 * v));
        }
        format!("{} ({} samples)\n{head}\n{row}\n", self.mode, self.ious.len())
    }
}
