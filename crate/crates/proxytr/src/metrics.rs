//! Evaluation metrics over point clouds.
//!
//! Directional terms reduce over per-point nearest-neighbor minima, summed
//! in sorted order, so every metric is permutation-invariant down to the bit.

use crate::error::{Error, Result};
use crate::geometry::{dist, NnIndex, Point, PointCloud};
use serde::{Deserialize, Serialize};

/// Chamfer distance conventions.
///
/// `CdL2` averages squared Euclidean nearest-neighbor distances and sums the
/// two directions; `CdL1` averages plain Euclidean distances and halves the
/// sum. `CdL1PointwiseL1` is the literal "L1-norm between points" reading,
/// exposed for comparison; reports use the two conventional presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferPreset {
    CdL1,
    CdL2,
    CdL1PointwiseL1,
}

fn l1_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Sum in ascending order: permutation-invariant float reduction.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.iter().sum()
}

/// Mean over `from` of the per-point minimum distance into `to`, with the
/// per-point value mapped by `f` (identity, sqrt, ...).
fn directional_mean(from: &PointCloud, to: &NnIndex<'_>, f: impl Fn(f64) -> f64) -> f64 {
    let minima: Vec<f64> = from.iter().map(|p| f(to.nearest(p).1)).collect();
    sorted_sum(minima) / from.len() as f64
}

fn directional_mean_l1(from: &PointCloud, to: &PointCloud) -> f64 {
    let minima: Vec<f64> = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| l1_dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    sorted_sum(minima) / from.len() as f64
}

/// Chamfer distance between two non-empty clouds under the given preset.
/// Symmetric in its arguments.
pub fn chamfer(p: &PointCloud, g: &PointCloud, preset: ChamferPreset) -> Result<f64> {
    if p.len() == 0 || g.len() == 0 {
        return Err(Error::Domain("chamfer requires non-empty clouds".into()));
    }
    match preset {
        ChamferPreset::CdL2 => {
            let index_g = NnIndex::build(g.points());
            let index_p = NnIndex::build(p.points());
            Ok(directional_mean(p, &index_g, |d2| d2) + directional_mean(g, &index_p, |d2| d2))
        }
        ChamferPreset::CdL1 => {
            let index_g = NnIndex::build(g.points());
            let index_p = NnIndex::build(p.points());
            Ok((directional_mean(p, &index_g, f64::sqrt) + directional_mean(g, &index_p, f64::sqrt)) / 2.0)
        }
        ChamferPreset::CdL1PointwiseL1 => {
            Ok((directional_mean_l1(p, g) + directional_mean_l1(g, p)) / 2.0)
        }
    }
}

/// F-Score at threshold `d`: harmonic mean of precision and recall, where a
/// point counts when its nearest neighbor in the other cloud is closer than
/// `d`. Returns 0 when both precision and recall are 0.
pub fn fscore(p: &PointCloud, g: &PointCloud, d: f64) -> Result<f64> {
    if p.len() == 0 || g.len() == 0 {
        return Err(Error::Domain("fscore requires non-empty clouds".into()));
    }
    if d <= 0.0 {
        return Err(Error::Domain(format!("fscore threshold must be positive, got {d}")));
    }
    let d2 = d * d;
    let index_g = NnIndex::build(g.points());
    let index_p = NnIndex::build(p.points());
    let precision = p.iter().filter(|q| index_g.nearest(q).1 < d2).count() as f64 / p.len() as f64;
    let recall = g.iter().filter(|q| index_p.nearest(q).1 < d2).count() as f64 / g.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean distance from each input point to its nearest neighbor in the output.
/// One-directional: measures how well the input is preserved.
pub fn fidelity(input: &PointCloud, output: &PointCloud) -> Result<f64> {
    if input.len() == 0 || output.len() == 0 {
        return Err(Error::Domain("fidelity requires non-empty clouds".into()));
    }
    let index = NnIndex::build(output.points());
    Ok(directional_mean(input, &index, f64::sqrt))
}

/// Minimal matching distance: the smallest `cd_l2` between the output and any
/// cloud in the reference set.
pub fn mmd(output: &PointCloud, reference_set: &[PointCloud]) -> Result<f64> {
    if reference_set.is_empty() {
        return Err(Error::Domain("mmd requires a non-empty reference set".into()));
    }
    let mut best = f64::INFINITY;
    for r in reference_set {
        best = best.min(chamfer(output, r, ChamferPreset::CdL2)?);
    }
    Ok(best)
}

/// All standard metrics for one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub prediction_points: usize,
    pub ground_truth_points: usize,
}

/// F-Score threshold for "1%" of the unit-normalized scale.
pub const FSCORE_THRESHOLD: f64 = 0.01;

pub fn evaluate(p: &PointCloud, g: &PointCloud, threshold: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        cd_l1: chamfer(p, g, ChamferPreset::CdL1)?,
        cd_l2: chamfer(p, g, ChamferPreset::CdL2)?,
        fscore: fscore(p, g, threshold)?,
        threshold,
        prediction_points: p.len(),
        ground_truth_points: g.len(),
    })
}

/// One line of a batch evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore: f64,
}

/// Batch evaluation: per-sample records plus aggregate means, serialized
/// with stable key order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchReport {
    pub samples: Vec<SampleRecord>,
    pub mean_cd_l1: f64,
    pub mean_cd_l2: f64,
    pub mean_fscore: f64,
}

impl BatchReport {
    pub fn from_samples(samples: Vec<SampleRecord>) -> BatchReport {
        let n = samples.len().max(1) as f64;
        let mean_cd_l1 = samples.iter().map(|s| s.cd_l1).sum::<f64>() / n;
        let mean_cd_l2 = samples.iter().map(|s| s.cd_l2).sum::<f64>() / n;
        let mean_fscore = samples.iter().map(|s| s.fscore).sum::<f64>() / n;
        BatchReport {
            samples,
            mean_cd_l1,
            mean_cd_l2,
            mean_fscore,
        }
    }
}
