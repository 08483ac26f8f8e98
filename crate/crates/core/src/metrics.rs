//! Overlap, surface-distance and border metrics, PR curves, and the
//! per-scan metrics CSV.
//!
//! Surfaces are sets of boundary-voxel centers. Point-to-surface distances
//! come from an exact distance transform of the other surface, so they equal
//! an all-pairs search.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::distance::{boundary, squared_edt};
use crate::error::{Error, Result};
use crate::volgrid::BinaryMask;

/// Degenerate cases, for which the affected fields are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub pred_empty: bool,
    pub gt_empty: bool,
}

impl MetricFlags {
    pub fn any(&self) -> bool {
        self.pred_empty || self.gt_empty
    }
}

impl fmt::Display for MetricFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.pred_empty {
            parts.push("pred_empty");
        }
        if self.gt_empty {
            parts.push("gt_empty");
        }
        f.write_str(&parts.join(";"))
    }
}

impl std::str::FromStr for MetricFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = MetricFlags::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            match part {
                "pred_empty" => flags.pred_empty = true,
                "gt_empty" => flags.gt_empty = true,
                _ => return Err(Error::Schema(format!("unknown metric flag {part:?}"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dsc: f64,
    pub msd: Option<f64>,
    pub hd95: Option<f64>,
    pub crd: Option<f64>,
    pub cad: Option<f64>,
    pub flags: MetricFlags,
}

/// World coordinates (mm) of boundary-voxel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

fn same_geometry(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.geometry() != b.geometry() {
        return Err(Error::Shape(format!(
            "mask geometries differ: {:?} vs {:?}",
            a.geometry(),
            b.geometry()
        )));
    }
    Ok(())
}

/// `2|S∩G| / (|S|+|G|)`; 1 when both masks are empty.
pub fn dice_coefficient(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_geometry(pred, gt)?;
    Ok(dice_of(pred.voxels(), gt.voxels()))
}

fn dice_of(s: &[bool], g: &[bool]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in s.iter().zip(g) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Dice of every axial slice; `None` where both slices are empty.
pub fn per_slice_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<Vec<Option<f64>>> {
    same_geometry(pred, gt)?;
    let [nx, ny, _] = pred.dims();
    Ok(pred
        .voxels()
        .chunks(nx * ny)
        .zip(gt.voxels().chunks(nx * ny))
        .map(|(s, g)| {
            if s.iter().chain(g).any(|&v| v) {
                Some(dice_of(s, g))
            } else {
                None
            }
        })
        .collect())
}

pub fn surface_points(mask: &BinaryMask) -> Result<SurfacePointSet> {
    if mask.is_all_background() {
        return Err(Error::Degenerate("surface of an empty mask".into()));
    }
    let geom = mask.geometry();
    let points = boundary(mask.voxels(), geom.dims)
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| geom.world(geom.coords(i)))
        .collect();
    Ok(SurfacePointSet { points })
}

/// Distance (mm) from every surface voxel of `from` to the nearest surface
/// voxel of `to`, in raster order.
pub fn directed_surface_distances(from: &BinaryMask, to: &BinaryMask) -> Result<Vec<f64>> {
    same_geometry(from, to)?;
    if from.is_all_background() || to.is_all_background() {
        return Err(Error::Degenerate("surface distance with an empty mask".into()));
    }
    let geom = from.geometry();
    let target = squared_edt(&boundary(to.voxels(), geom.dims), geom.dims, geom.spacing);
    Ok(boundary(from.voxels(), geom.dims)
        .iter()
        .zip(&target)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Percentile by linear interpolation between order statistics
/// (rank `q·(n−1)`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn mean_surface_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let a = directed_surface_distances(pred, gt)?;
    let b = directed_surface_distances(gt, pred)?;
    Ok(0.5 * (mean(&a) + mean(&b)))
}

/// Larger of the two directed 95th percentiles.
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let a = directed_surface_distances(pred, gt)?;
    let b = directed_surface_distances(gt, pred)?;
    Ok(percentile(&a, 0.95).max(percentile(&b, 0.95)))
}

pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let a = directed_surface_distances(pred, gt)?;
    let b = directed_surface_distances(gt, pred)?;
    Ok(a.iter().chain(&b).fold(0.0, |m, &d| m.max(d)))
}

/// `(crd, cad)` in mm: ground-truth minus predicted top (highest z) and
/// bottom slice, times the slice spacing.
pub fn cranial_caudal_errors(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    same_geometry(pred, gt)?;
    let (Some((pb, pt)), Some((gb, gtop))) = (pred.slice_range(), gt.slice_range()) else {
        return Err(Error::Degenerate("cranial/caudal error with an empty mask".into()));
    };
    let sz = pred.geometry().spacing[2];
    Ok(((gtop as f64 - pt as f64) * sz, (gb as f64 - pb as f64) * sz))
}

pub fn evaluate_scan(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegmentationMetrics> {
    let dsc = dice_coefficient(pred, gt)?;
    let flags = MetricFlags {
        pred_empty: pred.is_all_background(),
        gt_empty: gt.is_all_background(),
    };
    if flags.any() {
        return Ok(SegmentationMetrics {
            dsc,
            msd: None,
            hd95: None,
            crd: None,
            cad: None,
            flags,
        });
    }
    let a = directed_surface_distances(pred, gt)?;
    let b = directed_surface_distances(gt, pred)?;
    let (crd, cad) = cranial_caudal_errors(pred, gt)?;
    Ok(SegmentationMetrics {
        dsc,
        msd: Some(0.5 * (mean(&a) + mean(&b))),
        hd95: Some(percentile(&a, 0.95).max(percentile(&b, 0.95))),
        crd: Some(crd),
        cad: Some(cad),
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per threshold, in the order given.
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// `n + 1` evenly spaced thresholds from 1 down to 0.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| (n - i) as f64 / n as f64).collect()
}

/// Voxelwise precision/recall pooled over scans, with positives `p > τ`.
pub fn precision_recall_auc(scans: &[(&[f32], &BinaryMask)], thresholds: &[f64]) -> Result<PrCurve> {
    if scans.is_empty() || thresholds.is_empty() {
        return Err(Error::Parameter(
            "PR curve needs at least one scan and one threshold".into(),
        ));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Parameter(format!("threshold {t} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..thresholds.len()).collect();
    order.sort_by(|&a, &b| thresholds[a].total_cmp(&thresholds[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| thresholds[i]).collect();
    // hist[c] counts voxels exceeding exactly the c lowest thresholds.
    let m = sorted.len();
    let mut pos_hist = vec![0u64; m + 1];
    let mut neg_hist = vec![0u64; m + 1];
    let mut total_pos = 0u64;
    for (probs, gt) in scans {
        if probs.len() != gt.voxels().len() {
            return Err(Error::Shape(format!(
                "probability map has {} voxels, mask {}",
                probs.len(),
                gt.voxels().len()
            )));
        }
        for (&p, &g) in probs.iter().zip(gt.voxels()) {
            let c = sorted.partition_point(|&t| t < p as f64);
            if g {
                pos_hist[c] += 1;
                total_pos += 1;
            } else {
                neg_hist[c] += 1;
            }
        }
    }
    if total_pos == 0 {
        return Err(Error::Degenerate(
            "recall is undefined without ground-truth foreground".into(),
        ));
    }
    // Voxels above sorted[r] are those exceeding more than r thresholds.
    let mut points = vec![None; m];
    let (mut tp, mut fp) = (0u64, 0u64);
    for r in (0..m).rev() {
        tp += pos_hist[r + 1];
        fp += neg_hist[r + 1];
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        points[order[r]] = Some(PrPoint {
            threshold: sorted[r],
            tp,
            fp,
            fn_: total_pos - tp,
            precision,
            recall: tp as f64 / total_pos as f64,
        });
    }
    let points: Vec<PrPoint> = points
        .into_iter()
        .map(|p| p.expect("every threshold visited"))
        .collect();
    Ok(PrCurve {
        auc: trapezoid_auc(&points),
        points,
    })
}

fn trapezoid_auc(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// Column order of the per-scan metrics CSV.
pub const METRICS_COLUMNS: [&str; 9] = ["scan_id", "split", "tags", "dsc", "crd", "cad", "msd", "hd95", "flags"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scan_id: String,
    pub split: String,
    /// Semicolon-separated tag names.
    pub tags: String,
    pub dsc: f64,
    pub crd: Option<f64>,
    pub cad: Option<f64>,
    pub msd: Option<f64>,
    pub hd95: Option<f64>,
    pub flags: String,
}

impl MetricsRow {
    pub fn new(scan_id: &str, split: &str, tags: &[String], m: &SegmentationMetrics) -> Self {
        MetricsRow {
            scan_id: scan_id.into(),
            split: split.into(),
            tags: tags.join(";"),
            dsc: m.dsc,
            crd: m.crd,
            cad: m.cad,
            msd: m.msd,
            hd95: m.hd95,
            flags: m.flags.to_string(),
        }
    }

    pub fn tag_list(&self) -> Vec<&str> {
        self.tags.split(';').filter(|t| !t.is_empty()).collect()
    }

    pub fn metric_flags(&self) -> Result<MetricFlags> {
        self.flags.parse()
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

/// Read a metrics CSV; the header must list exactly [`METRICS_COLUMNS`].
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Schema(format!(
            "metrics columns {header:?}, expected {METRICS_COLUMNS:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: MetricsRow = rec.map_err(|e| Error::Schema(e.to_string()))?;
        row.metric_flags()?;
        rows.push(row);
    }
    Ok(rows)
}
