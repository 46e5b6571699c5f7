//! Resolved command configurations and their runners.
//!
//! A resolved config is what a manifest stores: every field the command reads,
//! including absolute input paths. Running it twice gives identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wholebody_core::bodymodel::{load_model, save_model};
use wholebody_core::fit::{fit_sweep_with_results, Bucketing, FitConfig, FitResult, SweepReport};
use wholebody_core::projection::CameraKind;
use wholebody_core::regress::{evaluate, evaluate_params, load_weights, save_weights, train, TrainConfig};
use wholebody_core::rng::{derive_seed, derive_seed_str};
use wholebody_core::synth::{
    generate_sample, read_dataset, write_dataset, BankConfig, CameraSamplerConfig, ParameterBank, SyntheticSample,
};
use wholebody_core::{BodyModel, Error, FullParams, Result, ToyModelConfig};

use crate::manifest::{write_json_atomic, write_with_atomic, write_atomic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Resolved {
    Model(ModelConfig),
    Gen(GenConfig),
    Fit(FitCommandConfig),
    Train(TrainCommandConfig),
    Eval(EvalConfig),
    BenchDistance(BenchDistanceConfig),
    BenchViewpoint(BenchViewpointConfig),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub seed: u64,
    pub toy: ToyModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub model: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub bank: BankConfig,
    /// Use a bank file instead of a procedural bank.
    pub bank_file: Option<PathBuf>,
    /// Reject (rather than drop) bank entries that violate the model limits.
    pub strict_bank: bool,
    pub camera: CameraSamplerConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            model: PathBuf::new(),
            n: 100,
            seed: 0,
            bank: BankConfig::default(),
            bank_file: None,
            strict_bank: false,
            camera: CameraSamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitCommandConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Fit only this sample.
    pub index: Option<usize>,
    pub camera_kinds: Vec<CameraKind>,
    pub bucketing: Bucketing,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for FitCommandConfig {
    fn default() -> Self {
        FitCommandConfig {
            model: PathBuf::new(),
            dataset: PathBuf::new(),
            index: None,
            camera_kinds: vec![CameraKind::D2s],
            bucketing: Bucketing::Distance,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCommandConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub seed: u64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub weights: Option<PathBuf>,
    pub fit_results: Option<PathBuf>,
    /// Which fits to score when the results hold several camera kinds.
    pub camera_kind: Option<CameraKind>,
    pub bucketing: Option<Bucketing>,
}

/// Narrower sampling ranges than the training bank: at the widest ranges the
/// fitter's depth-flip minima dominate the comparison between camera models.
pub fn benchmark_bank() -> BankConfig {
    BankConfig { angle_fraction: 0.2, shape_range: 0.5, ..BankConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchDistanceConfig {
    pub model: PathBuf,
    /// Camera distances as multiples of the rest body extent.
    pub distances: Vec<f64>,
    pub n_per_bucket: usize,
    pub camera_kinds: Vec<CameraKind>,
    pub seed: u64,
    pub bank: BankConfig,
    pub camera: CameraSamplerConfig,
    pub fit: FitConfig,
}

impl Default for BenchDistanceConfig {
    fn default() -> Self {
        BenchDistanceConfig {
            model: PathBuf::new(),
            distances: vec![2.0, 5.0, 30.0],
            n_per_bucket: 50,
            camera_kinds: vec![CameraKind::D2s, CameraKind::Weak],
            seed: 0,
            bank: benchmark_bank(),
            camera: CameraSamplerConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchViewpointConfig {
    pub model: PathBuf,
    pub viewpoints: usize,
    pub n_per_bucket: usize,
    /// Camera distance as a multiple of the rest body extent.
    pub distance: f64,
    pub camera_kinds: Vec<CameraKind>,
    pub seed: u64,
    pub bank: BankConfig,
    pub camera: CameraSamplerConfig,
    pub fit: FitConfig,
}

impl Default for BenchViewpointConfig {
    fn default() -> Self {
        BenchViewpointConfig {
            model: PathBuf::new(),
            viewpoints: 30,
            n_per_bucket: 10,
            distance: 2.0,
            camera_kinds: vec![CameraKind::D2s, CameraKind::Weak],
            seed: 0,
            bank: benchmark_bank(),
            camera: CameraSamplerConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

/// One fit as stored in `fit_results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub index: usize,
    pub camera_kind: CameraKind,
    pub result: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: wholebody_core::metrics::EvalReport,
    /// Samples without a usable prediction.
    pub skipped: usize,
}

/// Files read and written by one run.
#[derive(Debug, Default)]
pub struct RunFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
}

impl Resolved {
    pub fn name(&self) -> &'static str {
        match self {
            Resolved::Model(_) => "model",
            Resolved::Gen(_) => "gen",
            Resolved::Fit(_) => "fit",
            Resolved::Train(_) => "train",
            Resolved::Eval(_) => "eval",
            Resolved::BenchDistance(_) => "bench-distance",
            Resolved::BenchViewpoint(_) => "bench-viewpoint",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Resolved::Model(c) => c.seed,
            Resolved::Gen(c) => c.seed,
            Resolved::Fit(c) => c.seed,
            Resolved::Train(c) => c.seed,
            Resolved::Eval(_) => 0,
            Resolved::BenchDistance(c) => c.seed,
            Resolved::BenchViewpoint(c) => c.seed,
        }
    }

    /// Fans the command seed out to nested configs and makes input paths
    /// absolute, so the resolved form is self-contained.
    pub fn finalize(mut self) -> Result<Resolved> {
        fn abs(p: &mut PathBuf, what: &str) -> Result<()> {
            if p.as_os_str().is_empty() {
                return Err(Error::Configuration(format!("--{what} is required")));
            }
            *p = fs::canonicalize(&*p).map_err(|e| Error::Configuration(format!("{}: {e}", p.display())))?;
            Ok(())
        }
        match &mut self {
            Resolved::Model(_) => {}
            Resolved::Gen(c) => {
                abs(&mut c.model, "model")?;
                if let Some(b) = &mut c.bank_file {
                    abs(b, "bank-file")?;
                }
            }
            Resolved::Fit(c) => {
                abs(&mut c.model, "model")?;
                abs(&mut c.dataset, "dataset")?;
                c.fit.seed = derive_seed_str(c.seed, "fit");
            }
            Resolved::Train(c) => {
                abs(&mut c.model, "model")?;
                abs(&mut c.dataset, "dataset")?;
                c.train.seed = derive_seed_str(c.seed, "train");
            }
            Resolved::Eval(c) => {
                abs(&mut c.model, "model")?;
                abs(&mut c.dataset, "dataset")?;
                match (&mut c.weights, &mut c.fit_results) {
                    (Some(w), None) => abs(w, "weights")?,
                    (None, Some(f)) => abs(f, "fit-results")?,
                    _ => return Err(Error::Configuration("give exactly one of --weights and --fit-results".into())),
                }
            }
            Resolved::BenchDistance(c) => {
                abs(&mut c.model, "model")?;
                c.fit.seed = derive_seed_str(c.seed, "fit");
            }
            Resolved::BenchViewpoint(c) => {
                abs(&mut c.model, "model")?;
                c.fit.seed = derive_seed_str(c.seed, "fit");
            }
        }
        Ok(self)
    }

    pub fn run(&self, out: &Path, jobs: usize) -> Result<RunFiles> {
        fs::create_dir_all(out)?;
        match self {
            Resolved::Model(c) => run_model(c, out),
            Resolved::Gen(c) => run_gen(c, out, jobs),
            Resolved::Fit(c) => run_fit(c, out, jobs),
            Resolved::Train(c) => run_train(c, out),
            Resolved::Eval(c) => run_eval(c, out),
            Resolved::BenchDistance(c) => run_bench_distance(c, out, jobs),
            Resolved::BenchViewpoint(c) => run_bench_viewpoint(c, out, jobs),
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))
}

fn load_samples(path: &Path) -> Result<Vec<SyntheticSample>> {
    Ok(read_dataset(path)?.1)
}

fn run_model(c: &ModelConfig, out: &Path) -> Result<RunFiles> {
    let model = BodyModel::toy(&c.toy, c.seed)?;
    write_atomic(&out.join("model.json"), |tmp| save_model(&model, tmp))?;
    Ok(RunFiles { inputs: vec![], outputs: vec!["model.json".into()] })
}

fn run_gen(c: &GenConfig, out: &Path, jobs: usize) -> Result<RunFiles> {
    let model = load_model(&c.model)?;
    let mut inputs = vec![c.model.clone()];
    let bank = match &c.bank_file {
        Some(path) => {
            inputs.push(path.clone());
            ParameterBank::load(path, &model, c.strict_bank)?.0
        }
        None => ParameterBank::procedural(&model, &c.bank, derive_seed_str(c.seed, "bank"))?,
    };
    c.camera.validate()?;
    let base = derive_seed_str(c.seed, "dataset");
    let samples: Vec<SyntheticSample> = pool(jobs)?.install(|| {
        (0..c.n)
            .into_par_iter()
            .map(|i| generate_sample(&model, &bank, &c.camera, derive_seed(base, i as u64)))
            .collect::<Result<_>>()
    })?;
    let meta = serde_json::json!({ "seed": c.seed, "n": c.n });
    write_atomic(&out.join("dataset.ndjson"), |tmp| write_dataset(tmp, &samples, meta))?;
    Ok(RunFiles { inputs, outputs: vec!["dataset.ndjson".into()] })
}

fn write_sweep(out: &Path, report: &SweepReport) -> Result<Vec<String>> {
    write_with_atomic(&out.join("fits.csv"), |w| report.write_records_csv(w))?;
    write_with_atomic(&out.join("report.csv"), |w| report.write_csv(w))?;
    Ok(vec!["fits.csv".into(), "report.csv".into()])
}

fn run_fit(c: &FitCommandConfig, out: &Path, jobs: usize) -> Result<RunFiles> {
    let model = load_model(&c.model)?;
    let mut samples = load_samples(&c.dataset)?;
    let offset = match c.index {
        Some(i) if i >= samples.len() => {
            return Err(Error::Configuration(format!("index {i} outside a dataset of {}", samples.len())))
        }
        Some(i) => {
            samples = vec![samples.swap_remove(i)];
            i
        }
        None => 0,
    };
    let (mut report, fits) = fit_sweep_with_results(&model, &samples, &c.camera_kinds, &c.fit, c.bucketing, jobs)?;
    report.records.iter_mut().for_each(|r| r.index += offset);
    let entries: Vec<FitEntry> = report
        .records
        .iter()
        .zip(fits)
        .map(|(r, fit)| FitEntry { index: r.index, camera_kind: r.camera_kind, result: fit, error: r.error.clone() })
        .collect();
    write_json_atomic(&out.join("fit_results.json"), &entries)?;
    let mut outputs = vec!["fit_results.json".to_string()];
    outputs.extend(write_sweep(out, &report)?);
    Ok(RunFiles { inputs: vec![c.model.clone(), c.dataset.clone()], outputs })
}

fn run_train(c: &TrainCommandConfig, out: &Path) -> Result<RunFiles> {
    let model = load_model(&c.model)?;
    let samples = load_samples(&c.dataset)?;
    let outcome = train(&model, &samples, &c.train)?;
    write_atomic(&out.join("weights.json"), |tmp| save_weights(&outcome.regressor, tmp))?;
    write_with_atomic(&out.join("curve.csv"), |w| outcome.write_curve_csv(w))?;
    Ok(RunFiles { inputs: vec![c.model.clone(), c.dataset.clone()], outputs: vec!["weights.json".into(), "curve.csv".into()] })
}

fn run_eval(c: &EvalConfig, out: &Path) -> Result<RunFiles> {
    let model = load_model(&c.model)?;
    let samples = load_samples(&c.dataset)?;
    let mut inputs = vec![c.model.clone(), c.dataset.clone()];
    let output = if let Some(w) = &c.weights {
        inputs.push(w.clone());
        let reg = load_weights(w, &model)?;
        EvalOutput { report: evaluate(&reg, &model, &samples, c.bucketing)?, skipped: 0 }
    } else {
        let path = c.fit_results.as_ref().expect("finalize checks the prediction source");
        inputs.push(path.clone());
        let entries: Vec<FitEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut kinds: Vec<CameraKind> = entries.iter().map(|e| e.camera_kind).collect();
        kinds.dedup();
        let kind = match (c.camera_kind, kinds.as_slice()) {
            (Some(k), _) => k,
            (None, [k]) => *k,
            (None, _) => return Err(Error::Configuration("fit results hold several camera kinds; pass --camera-kind".into())),
        };
        let mut preds: Vec<Option<FullParams>> = vec![None; samples.len()];
        for e in entries.into_iter().filter(|e| e.camera_kind == kind) {
            let slot = preds
                .get_mut(e.index)
                .ok_or_else(|| Error::Configuration(format!("fit index {} outside the dataset", e.index)))?;
            *slot = e.result.map(|r| r.params);
        }
        let (report, skipped) = evaluate_params(&model, &samples, &preds, c.bucketing)?;
        EvalOutput { report, skipped }
    };
    write_json_atomic(&out.join("eval.json"), &output)?;
    write_with_atomic(&out.join("eval.csv"), |w| output.report.write_csv(w))?;
    Ok(RunFiles { inputs, outputs: vec!["eval.json".into(), "eval.csv".into()] })
}

fn bench_samples_at_distance(
    model: &BodyModel,
    bank: &ParameterBank,
    camera: &CameraSamplerConfig,
    distance: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    let cfg = CameraSamplerConfig { distance_factors: vec![distance], ..camera.clone() };
    (0..n).map(|i| generate_sample(model, bank, &cfg, derive_seed(seed, i as u64))).collect()
}

fn run_bench_distance(c: &BenchDistanceConfig, out: &Path, jobs: usize) -> Result<RunFiles> {
    if c.distances.is_empty() || c.n_per_bucket == 0 {
        return Err(Error::Configuration("need at least one distance and one sample per bucket".into()));
    }
    let model = load_model(&c.model)?;
    let bank = ParameterBank::procedural(&model, &c.bank, derive_seed_str(c.seed, "bank"))?;
    let base = derive_seed_str(c.seed, "samples");
    let mut samples = Vec::new();
    for (j, &d) in c.distances.iter().enumerate() {
        samples.extend(bench_samples_at_distance(&model, &bank, &c.camera, d, c.n_per_bucket, derive_seed(base, j as u64))?);
    }
    let (report, _) = fit_sweep_with_results(&model, &samples, &c.camera_kinds, &c.fit, Bucketing::Distance, jobs)?;
    Ok(RunFiles { inputs: vec![c.model.clone()], outputs: write_sweep(out, &report)? })
}

/// Draws samples in seed order and keeps the first `n` landing in each
/// azimuth bucket, so every viewpoint gets the same count.
fn bench_samples_per_view(model: &BodyModel, bank: &ParameterBank, c: &BenchViewpointConfig) -> Result<Vec<SyntheticSample>> {
    let cfg = CameraSamplerConfig { distance_factors: vec![c.distance], azimuths: c.viewpoints, ..c.camera.clone() };
    let base = derive_seed_str(c.seed, "samples");
    let mut buckets: Vec<Vec<SyntheticSample>> = vec![Vec::new(); c.viewpoints];
    let budget = 100 * c.viewpoints * c.n_per_bucket;
    let mut filled = 0;
    for k in 0..budget {
        let s = generate_sample(model, bank, &cfg, derive_seed(base, k as u64))?;
        let b = &mut buckets[s.viewpoint_bucket];
        if b.len() < c.n_per_bucket {
            b.push(s);
            filled += 1;
            if filled == c.viewpoints * c.n_per_bucket {
                return Ok(buckets.into_iter().flatten().collect());
            }
        }
    }
    Err(Error::GenerationExhausted(budget))
}

fn run_bench_viewpoint(c: &BenchViewpointConfig, out: &Path, jobs: usize) -> Result<RunFiles> {
    if c.viewpoints == 0 || c.n_per_bucket == 0 {
        return Err(Error::Configuration("need at least one viewpoint and one sample per bucket".into()));
    }
    let model = load_model(&c.model)?;
    let bank = ParameterBank::procedural(&model, &c.bank, derive_seed_str(c.seed, "bank"))?;
    let samples = bench_samples_per_view(&model, &bank, c)?;
    let (report, _) = fit_sweep_with_results(&model, &samples, &c.camera_kinds, &c.fit, Bucketing::Viewpoint, jobs)?;
    Ok(RunFiles { inputs: vec![c.model.clone()], outputs: write_sweep(out, &report)? })
}
