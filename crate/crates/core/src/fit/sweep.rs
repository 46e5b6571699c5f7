//! Fits every sample of a dataset under several camera kinds and aggregates
//! the 3D errors per bucket.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_frame, FitConfig, FitResult};
use crate::bodymodel::BodyModel;
use crate::error::{Error, Result};
use crate::params::FullParams;
use crate::metrics::{bucketed_report, mean, sample_error, SampleError};
use crate::projection::CameraKind;
use crate::rng::derive_seed;
use crate::synth::SyntheticSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucketing {
    Distance,
    Viewpoint,
}

impl Bucketing {
    pub fn label(self, s: &SyntheticSample) -> String {
        match self {
            Bucketing::Distance => s.distance_bucket.clone(),
            Bucketing::Viewpoint => s.viewpoint_bucket.to_string(),
        }
    }
}

/// Outcome of one fit. Errors are kept, not dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub index: usize,
    pub camera_kind: CameraKind,
    pub bucket: String,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub l_2d: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub camera_kind: CameraKind,
    pub bucket: String,
    pub n: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mean_l2d: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Successful records of one kind, optionally restricted to a bucket.
    pub fn successes(&self, kind: CameraKind, bucket: Option<&str>) -> Vec<&SweepRecord> {
        self.records
            .iter()
            .filter(|r| r.camera_kind == kind && r.mpjpe.is_some() && bucket.is_none_or(|b| r.bucket == b))
            .collect()
    }

    pub fn median_mpjpe(&self, kind: CameraKind, bucket: Option<&str>) -> Option<f64> {
        let mut v: Vec<f64> = self.successes(kind, bucket).iter().filter_map(|r| r.mpjpe).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn row(&self, kind: CameraKind, bucket: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.camera_kind == kind && r.bucket == bucket)
    }

    /// Columns `camera_kind,bucket,n,mpjpe,pa_mpjpe,mean_L2D,failures`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["camera_kind", "bucket", "n", "mpjpe", "pa_mpjpe", "mean_L2D", "failures"])?;
        for r in &self.rows {
            w.write_record([
                r.camera_kind.name().to_string(),
                r.bucket.clone(),
                r.n.to_string(),
                r.mpjpe.to_string(),
                r.pa_mpjpe.to_string(),
                r.mean_l2d.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line per fit, for medians and failure analysis.
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "camera_kind", "bucket", "mpjpe", "pa_mpjpe", "l_2d", "converged", "iterations", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.index.to_string(),
                r.camera_kind.name().to_string(),
                r.bucket.clone(),
                opt(r.mpjpe),
                opt(r.pa_mpjpe),
                opt(r.l_2d),
                r.converged.to_string(),
                r.iterations.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Root-relative body-joint MPJPE / PA-MPJPE (mm) of `pred` against a sample.
pub fn body_joint_error(model: &BodyModel, pred: &FullParams, s: &SyntheticSample, bucket: Option<String>) -> Result<SampleError> {
    let body = model.body_range();
    let q = model.keypoints(pred)?;
    let gt: Vec<_> = s.j3d.points[body.clone()].iter().map(|p| nalgebra::Vector3::from(*p)).collect();
    sample_error(&q[body], &gt, 0, true, bucket)
}

fn fit_one(
    model: &BodyModel,
    s: &SyntheticSample,
    index: usize,
    kind: CameraKind,
    cfg: &FitConfig,
    bucketing: Bucketing,
) -> (SweepRecord, Option<FitResult>) {
    let cfg = FitConfig { camera_kind: kind, seed: derive_seed(cfg.seed, index as u64), ..cfg.clone() };
    let bucket = bucketing.label(s);
    let result = fit_frame(&s.j2d, model, &cfg).and_then(|fit| {
        let err = body_joint_error(model, &fit.params, s, None)?;
        Ok((fit, err))
    });
    let base = SweepRecord {
        index,
        camera_kind: kind,
        bucket,
        mpjpe: None,
        pa_mpjpe: None,
        l_2d: None,
        converged: false,
        iterations: 0,
        error: None,
    };
    match result {
        Ok((fit, err)) => {
            let record = SweepRecord {
                mpjpe: Some(err.mpjpe),
                pa_mpjpe: Some(err.pa_mpjpe),
                l_2d: Some(fit.losses.l_2d),
                converged: fit.converged,
                iterations: fit.iterations,
                ..base
            };
            (record, Some(fit))
        }
        Err(e) => (SweepRecord { error: Some(format!("{}: {e}", e.kind())), ..base }, None),
    }
}

/// Runs [`fit_frame`] on every sample for every kind. `jobs` threads share
/// the work; records come back in (kind, sample) order whatever the count.
pub fn fit_sweep(
    model: &BodyModel,
    samples: &[SyntheticSample],
    kinds: &[CameraKind],
    cfg: &FitConfig,
    bucketing: Bucketing,
    jobs: usize,
) -> Result<SweepReport> {
    Ok(fit_sweep_with_results(model, samples, kinds, cfg, bucketing, jobs)?.0)
}

/// [`fit_sweep`] that also hands back each fit, aligned with the records.
pub fn fit_sweep_with_results(
    model: &BodyModel,
    samples: &[SyntheticSample],
    kinds: &[CameraKind],
    cfg: &FitConfig,
    bucketing: Bucketing,
    jobs: usize,
) -> Result<(SweepReport, Vec<Option<FitResult>>)> {
    if samples.is_empty() || kinds.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    cfg.validate()?;
    let tasks: Vec<(CameraKind, usize)> =
        kinds.iter().flat_map(|k| (0..samples.len()).map(move |i| (*k, i))).collect();
    let one = |&(k, i): &(CameraKind, usize)| fit_one(model, &samples[i], i, k, cfg, bucketing);
    let out: Vec<(SweepRecord, Option<FitResult>)> = if jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| tasks.par_iter().map(one).collect())
    } else {
        tasks.iter().map(one).collect()
    };
    let (records, fits): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let rows = aggregate(&records, kinds)?;
    Ok((SweepReport { records, rows }, fits))
}

fn aggregate(records: &[SweepRecord], kinds: &[CameraKind]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let mine: Vec<&SweepRecord> = records.iter().filter(|r| r.camera_kind == kind).collect();
        let mut labels: Vec<&str> = mine.iter().map(|r| r.bucket.as_str()).collect();
        labels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) => x.total_cmp(&y),
            _ => a.cmp(b),
        });
        labels.dedup();
        let ok: Vec<SampleError> = mine
            .iter()
            .filter_map(|r| {
                Some(SampleError { mpjpe: r.mpjpe?, pa_mpjpe: r.pa_mpjpe?, bucket: Some(r.bucket.clone()) })
            })
            .collect();
        let report = if ok.is_empty() { None } else { Some(bucketed_report(&ok, true)?) };
        let row = |label: &str, members: Vec<&&SweepRecord>, stats: Option<(usize, f64, f64)>| {
            let l2d: Vec<f64> = members.iter().filter_map(|r| r.l_2d).collect();
            let (n, m, p) = stats.unwrap_or((0, f64::NAN, f64::NAN));
            SweepRow {
                camera_kind: kind,
                bucket: label.to_string(),
                n,
                mpjpe: m,
                pa_mpjpe: p,
                mean_l2d: if l2d.is_empty() { f64::NAN } else { mean(&l2d) },
                failures: members.iter().filter(|r| r.mpjpe.is_none()).count(),
            }
        };
        let several = labels.len() > 1;
        for label in labels {
            let members: Vec<&&SweepRecord> = mine.iter().filter(|r| r.bucket == label).collect();
            let stats = report
                .as_ref()
                .and_then(|rep| rep.buckets.iter().find(|b| b.label == label))
                .map(|b| (b.n, b.mpjpe, b.pa_mpjpe));
            rows.push(row(label, members, stats));
        }
        if several {
            let stats = report.as_ref().map(|r| (r.n_samples, r.mpjpe, r.pa_mpjpe));
            rows.push(row("all", mine.iter().collect(), stats));
        }
    }
    Ok(rows)
}
