use super::*;
use crate::bodymodel::ToyModelConfig;
use std::sync::OnceLock;

fn model() -> &'static BodyModel {
    static MODEL: OnceLock<BodyModel> = OnceLock::new();
    MODEL.get_or_init(|| BodyModel::toy(&ToyModelConfig::default(), 0).unwrap())
}

fn small_bank(seed: u64) -> ParameterBank {
    let cfg = BankConfig { body_poses: 20, hand_poses: 20, expressions: 10, shapes: 10, ..Default::default() };
    ParameterBank::procedural(model(), &cfg, seed).unwrap()
}

#[test]
fn procedural_bank_respects_limits_and_is_reproducible() {
    let m = model();
    let cfg = BankConfig { body_poses: 100, ..Default::default() };
    let a = ParameterBank::procedural(m, &cfg, 0).unwrap();
    let b = ParameterBank::procedural(m, &cfg, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.body_poses.len(), 100);
    let (checked, report) = a.clone().validate(m, true).unwrap();
    assert_eq!(checked, a);
    assert!(report.is_empty());
    assert_ne!(a, ParameterBank::procedural(m, &cfg, 1).unwrap());
}

#[test]
fn hand_entries_move_the_fingers() {
    let bank = small_bank(3);
    let max = bank.hand_poses.iter().flat_map(|h| model().expand_hand(Part::LeftHand, &h.pca)).flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(max > 0.1, "hand poses are nearly rest: {max}");
}

#[test]
fn zero_fraction_gives_rest_poses() {
    let m = model();
    let cfg = BankConfig { angle_fraction: 0.0, body_poses: 10, hand_poses: 10, ..Default::default() };
    let bank = ParameterBank::procedural(m, &cfg, 5).unwrap();
    assert!(bank.body_poses.iter().all(|e| e.theta_body.iter().flatten().all(|v| *v == 0.0)));
    assert!(bank.hand_poses.iter().all(|e| m.expand_hand(Part::LeftHand, &e.pca).iter().flatten().all(|v| *v == 0.0)));
}

#[test]
fn file_bank_with_violation() {
    let m = model();
    let mut bank = small_bank(1);
    let knee = m.joint_tree.names.iter().position(|n| n == "l_knee").unwrap();
    bank.body_poses[4].theta_body[knee - 1] = [0.5, 0.0, 0.0];
    bank.body_poses[4].provenance = "capture:17".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.json");
    std::fs::write(&path, serde_json::to_string(&bank).unwrap()).unwrap();
    match ParameterBank::load(&path, m, true) {
        Err(Error::LimitViolation { category, index, provenance, .. }) => {
            assert_eq!((category.as_str(), index, provenance.as_str()), ("body_poses", 4, "capture:17"));
        }
        other => panic!("expected a limit violation, got {other:?}"),
    }
    let (lenient, report) = ParameterBank::load(&path, m, false).unwrap();
    assert_eq!(lenient.body_poses.len(), bank.body_poses.len() - 1);
    assert_eq!(report.len(), 1);
    assert!(report[0].contains("capture:17"));
}

#[test]
fn empty_category_is_an_error() {
    let mut bank = small_bank(2);
    bank.shapes.clear();
    let r = sample_full_params(model(), &bank, &CameraSamplerConfig::default(), 0);
    assert!(matches!(r, Err(Error::EmptyCategory(c)) if c == "shapes"));
}

#[test]
fn singleton_bank_fixes_everything_but_the_camera() {
    let m = model();
    let bank = ParameterBank::rest(m);
    let cfg = CameraSamplerConfig { azimuths: 1, ..Default::default() };
    let a = sample_full_params(m, &bank, &cfg, 1).unwrap();
    let b = sample_full_params(m, &bank, &cfg, 2).unwrap();
    assert_eq!(FullParams { camera: b.params.camera.clone(), ..a.params.clone() }, b.params);
    assert_ne!(a.camera, b.camera);
    assert_eq!(sample_full_params(m, &bank, &cfg, 1).unwrap(), a);
}

#[test]
fn category_draws_are_uniform() {
    let m = model();
    let cfg = BankConfig { body_poses: 5, hand_poses: 4, expressions: 3, shapes: 6, ..Default::default() };
    let bank = ParameterBank::procedural(m, &cfg, 0).unwrap();
    let cam = CameraSamplerConfig::default();
    let n = 10_000;
    let sizes = [5usize, 4, 4, 3, 6];
    let mut counts: Vec<Vec<usize>> = sizes.iter().map(|s| vec![0; *s]).collect();
    let mut views = vec![0usize; cam.azimuths];
    for i in 0..n {
        let d = sample_full_params(m, &bank, &cam, crate::rng::derive_seed(99, i)).unwrap();
        for (c, pick) in d.picks.iter().enumerate() {
            counts[c][*pick] += 1;
        }
        views[d.viewpoint_bucket] += 1;
    }
    for (c, size) in sizes.iter().enumerate() {
        let p = 1.0 / *size as f64;
        let (mu, sigma) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
        for k in &counts[c] {
            assert!((*k as f64 - mu).abs() <= 3.0 * sigma, "category {c}: {k} vs {mu}±{sigma}");
        }
    }
    let p = 1.0 / cam.azimuths as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!(views.iter().all(|k| (*k as f64 - n as f64 * p).abs() <= 3.5 * sigma));
}

fn fixed_camera() -> CameraSamplerConfig {
    CameraSamplerConfig {
        distance_factors: vec![3.0],
        azimuths: 1,
        scale_px: [500.0, 500.0],
        offset_fraction: 0.0,
        max_retries: 3,
    }
}

#[test]
fn rest_sample_projects_rest_keypoints() {
    let m = model();
    let s = generate_sample(m, &ParameterBank::rest(m), &fixed_camera(), 4).unwrap();
    let extent = m.rest_extent();
    let d = 3.0 * extent;
    let f = 500.0 * d / extent;
    for (i, p) in m.rest_keypoints().iter().enumerate() {
        let u = f * p.x / (d + p.z);
        let v = f * p.y / (d + p.z);
        assert!((s.j2d.points[i][0] - u).abs() < 1e-9 && (s.j2d.points[i][1] - v).abs() < 1e-9);
    }
    assert_eq!(s.distance_bucket, "3");
    assert_eq!(s.viewpoint_bucket, 0);
}

#[test]
fn samples_satisfy_pairing_invariants() {
    let m = model();
    let bank = small_bank(7);
    let cfg = CameraSamplerConfig::default();
    for i in 0..10 {
        let s = generate_sample(m, &bank, &cfg, i).unwrap();
        assert_eq!(s.camera.project(&s.j3d).unwrap(), s.j2d);
        let direct = m.regress_keypoints(&m.skin(&s.params).unwrap()).unwrap();
        for (a, b) in direct.iter().zip(&s.j3d.points) {
            assert_eq!([a.x, a.y, a.z], *b);
        }
        assert_eq!(s.params.camera, s.camera);
        assert!(matches!(s.camera, CameraModel::Perspective(_)));
        assert_eq!(generate_sample(m, &bank, &cfg, i).unwrap(), s);
    }
    assert_ne!(generate_sample(m, &bank, &cfg, 0).unwrap(), generate_sample(m, &bank, &cfg, 1).unwrap());
}

#[test]
fn camera_inside_the_body_exhausts_retries() {
    let m = model();
    let cfg = CameraSamplerConfig { distance_factors: vec![0.01], ..fixed_camera() };
    assert!(matches!(generate_sample(m, &ParameterBank::rest(m), &cfg, 0), Err(Error::GenerationExhausted(3))));
}

#[test]
fn degrade_identity_and_dropout() {
    let m = model();
    let s = generate_sample(m, &small_bank(0), &CameraSamplerConfig::default(), 0).unwrap();
    assert_eq!(degrade(&s.j2d, &DegradeConfig::default()).unwrap(), s.j2d);
    let cfg = DegradeConfig {
        dropout_prob: PartDropout { left_hand: 1.0, right_hand: 1.0, ..Default::default() },
        ..Default::default()
    };
    let d = degrade(&s.j2d, &cfg).unwrap();
    for i in 0..d.len() {
        let hand = matches!(d.parts[i], Part::LeftHand | Part::RightHand);
        assert_eq!(d.visible[i], !hand);
    }
    assert!(degrade(&s.j2d, &DegradeConfig { keypoint_noise_sigma: -1.0, ..Default::default() }).is_err());
}

#[test]
fn noise_displacement_follows_rayleigh_mean() {
    let n = 10_000;
    let j = Keypoints2D { points: vec![[10.0, -4.0]; n], visible: vec![true; n], parts: vec![Part::Body; n] };
    let sigma = 2.0;
    let d = degrade(&j, &DegradeConfig { keypoint_noise_sigma: sigma, seed: 11, ..Default::default() }).unwrap();
    let dist: Vec<f64> = d.points.iter().map(|p| ((p[0] - 10.0).powi(2) + (p[1] + 4.0).powi(2)).sqrt()).collect();
    let mean = crate::metrics::mean(&dist);
    let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
    let sd = sigma * ((4.0 - std::f64::consts::PI) / 2.0).sqrt() / (n as f64).sqrt();
    assert!((mean - expected).abs() <= 3.0 * sd, "{mean} vs {expected}");
    assert_eq!(degrade(&j, &DegradeConfig { keypoint_noise_sigma: sigma, seed: 11, ..Default::default() }).unwrap(), d);
}

#[test]
fn dataset_round_trip_and_errors() {
    let m = model();
    let samples = generate_dataset(m, &small_bank(0), &CameraSamplerConfig::default(), 3, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.ndjson");
    write_dataset(&path, &samples, serde_json::json!({"seed": 5})).unwrap();
    let (header, back) = read_dataset(&path).unwrap();
    assert_eq!(back, samples);
    assert_eq!(header.count, 3);

    let empty = dir.path().join("empty.ndjson");
    write_dataset(&empty, &[], serde_json::Value::Null).unwrap();
    assert!(read_dataset(&empty).unwrap().1.is_empty());

    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"params\": 3";
    let broken = dir.path().join("broken.ndjson");
    std::fs::write(&broken, lines.join("\n")).unwrap();
    assert!(matches!(read_dataset(&broken), Err(Error::MalformedRecord { line: 3, .. })));

    let future = dir.path().join("future.ndjson");
    std::fs::write(&future, text.replacen("\"version\":1", "\"version\":2", 1)).unwrap();
    assert!(matches!(read_dataset(&future), Err(Error::Version { found: 2, .. })));
}
