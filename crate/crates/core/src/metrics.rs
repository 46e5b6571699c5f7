//! MPJPE, Procrustes alignment and bucketed evaluation reports.
//!
//! Errors are computed in model units (metres); reports convert to
//! millimetres. Sums use pairwise summation so parallel reductions do not
//! drift.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MM_PER_UNIT: f64 = 1000.0;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let (a, b) = values.split_at(values.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

fn check_pair(pred: &[Vector3<f64>], gt: &[Vector3<f64>], visible: Option<&[bool]>) -> Result<Vec<usize>> {
    if pred.len() != gt.len() || visible.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::Shape(format!("prediction has {} joints, ground truth {}", pred.len(), gt.len())));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| visible.is_none_or(|v| v[i])).collect();
    if idx.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(idx)
}

/// Mean Euclidean distance over visible joints (all joints when `visible` is `None`).
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], visible: Option<&[bool]>) -> Result<f64> {
    let idx = check_pair(pred, gt, visible)?;
    let d: Vec<f64> = idx.iter().map(|&i| (pred[i] - gt[i]).norm()).collect();
    Ok(mean(&d))
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(points: &[Vector3<f64>], idx: &[usize]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for ax in 0..3 {
        let v: Vec<f64> = idx.iter().map(|&i| points[i][ax]).collect();
        c[ax] = mean(&v);
    }
    c
}

/// Least-squares similarity (or rigid, with `with_scale = false`) alignment
/// of `pred` onto `gt`, estimated from visible joints and applied to all.
pub fn procrustes_align(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    visible: Option<&[bool]>,
    with_scale: bool,
) -> Result<(Similarity, Vec<Vector3<f64>>)> {
    let idx = check_pair(pred, gt, visible)?;
    if idx.len() < 3 {
        return Err(Error::DegenerateAlignment(format!("{} visible joints, need 3", idx.len())));
    }
    let mx = centroid(pred, &idx);
    let my = centroid(gt, &idx);
    let mut cov = Matrix3::zeros();
    let mut cx = Matrix3::zeros();
    let mut cy = Matrix3::zeros();
    let mut var_x = 0.0;
    for &i in &idx {
        let x = pred[i] - mx;
        let y = gt[i] - my;
        cov += y * x.transpose();
        cx += x * x.transpose();
        cy += y * y.transpose();
        var_x += x.norm_squared();
    }
    // Both clouds must span at least a plane.
    for c in [cx, cy] {
        let mut ev = c.symmetric_eigenvalues().as_slice().to_vec();
        ev.sort_by(|a, b| b.total_cmp(a));
        if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
            return Err(Error::DegenerateAlignment("point cloud has rank below 2".into()));
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale { (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x } else { 1.0 };
    let translation = my - rotation * mx * scale;
    let sim = Similarity { scale, rotation, translation };
    let aligned = pred.iter().map(|p| sim.apply(p)).collect();
    Ok((sim, aligned))
}

/// MPJPE after Procrustes alignment.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], visible: Option<&[bool]>, with_scale: bool) -> Result<f64> {
    let (_, aligned) = procrustes_align(pred, gt, visible, with_scale)?;
    mpjpe(&aligned, gt, visible)
}

/// Points expressed relative to point `root`.
pub fn root_relative(points: &[Vector3<f64>], root: usize) -> Vec<Vector3<f64>> {
    points.iter().map(|p| p - points[root]).collect()
}

/// Per-sample errors (millimetres) with an optional bucket label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub bucket: Option<String>,
}

/// Root-relative MPJPE and PA-MPJPE in millimetres.
pub fn sample_error(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    root: usize,
    with_scale: bool,
    bucket: Option<String>,
) -> Result<SampleError> {
    let (p, g) = (root_relative(pred, root), root_relative(gt, root));
    Ok(SampleError {
        mpjpe: mpjpe(&p, &g, None)? * MM_PER_UNIT,
        pa_mpjpe: pa_mpjpe(&p, &g, None, with_scale)? * MM_PER_UNIT,
        bucket,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub label: String,
    pub n: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub units: String,
    pub n_samples: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub buckets: Vec<BucketStats>,
}

fn label_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Overall and per-bucket means. With `bucketed`, every sample must carry a
/// label; buckets are ordered numerically when labels parse as numbers.
pub fn bucketed_report(samples: &[SampleError], bucketed: bool) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let overall = |s: &[&SampleError]| -> (f64, f64) {
        let a: Vec<f64> = s.iter().map(|e| e.mpjpe).collect();
        let b: Vec<f64> = s.iter().map(|e| e.pa_mpjpe).collect();
        (mean(&a), mean(&b))
    };
    let all: Vec<&SampleError> = samples.iter().collect();
    let (mpjpe, pa_mpjpe) = overall(&all);
    let mut buckets = Vec::new();
    if bucketed {
        if let Some(i) = samples.iter().position(|s| s.bucket.is_none()) {
            return Err(Error::MissingBucket(i));
        }
        let mut labels: Vec<&str> = samples.iter().filter_map(|s| s.bucket.as_deref()).collect();
        labels.sort_by(|a, b| label_order(a, b));
        labels.dedup();
        for label in labels {
            let members: Vec<&SampleError> =
                samples.iter().filter(|s| s.bucket.as_deref() == Some(label)).collect();
            let (m, p) = overall(&members);
            buckets.push(BucketStats { label: label.to_string(), n: members.len(), mpjpe: m, pa_mpjpe: p });
        }
    }
    Ok(EvalReport { units: "mm".into(), n_samples: samples.len(), mpjpe, pa_mpjpe, buckets })
}

impl EvalReport {
    /// CSV with columns `bucket,n,mpjpe,pa_mpjpe`; the overall row is labelled `all`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bucket", "n", "mpjpe", "pa_mpjpe"])?;
        for b in &self.buckets {
            w.write_record([b.label.clone(), b.n.to_string(), b.mpjpe.to_string(), b.pa_mpjpe.to_string()])?;
        }
        w.write_record(["all".into(), self.n_samples.to_string(), self.mpjpe.to_string(), self.pa_mpjpe.to_string()])?;
        w.flush()?;
        Ok(())
    }
}
