use super::*;
use crate::bodymodel::ToyModelConfig;
use crate::metrics::sample_error;
use crate::projection::Keypoints3D;
use crate::synth::{generate_sample, BankConfig, CameraSamplerConfig, ParameterBank, SyntheticSample};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn model() -> &'static BodyModel {
    static MODEL: OnceLock<BodyModel> = OnceLock::new();
    MODEL.get_or_init(|| BodyModel::toy(&ToyModelConfig::default(), 0).unwrap())
}

fn bank() -> &'static ParameterBank {
    static BANK: OnceLock<ParameterBank> = OnceLock::new();
    BANK.get_or_init(|| ParameterBank::procedural(model(), &BankConfig { angle_fraction: 0.2, shape_range: 0.5, ..Default::default() }, 1).unwrap())
}

fn sample(factor: f64, seed: u64) -> SyntheticSample {
    let cfg = CameraSamplerConfig { distance_factors: vec![factor], ..Default::default() };
    generate_sample(model(), bank(), &cfg, seed).unwrap()
}

fn weak() -> CameraModel {
    CameraModel::Weak(WeakPerspective { s: 1.0, t: [0.0, 0.0] })
}

fn only_2d() -> LossWeights {
    LossWeights { w_pm: 0.0, w_r: 0.0, w_2d: 1.0, w_3d: 0.0 }
}

#[test]
fn one_keypoint_off_by_three_four() {
    let m = model();
    let p = FullParams::rest(m.dims(), true, weak());
    let mut j2d = p.camera.project(&m.keypoints3d(&p).unwrap()).unwrap();
    j2d.visible.iter_mut().for_each(|v| *v = false);
    j2d.visible[5] = true;
    j2d.points[5][0] -= 3.0;
    j2d.points[5][1] += 4.0;
    let t = Targets { j2d: Some(&j2d), ..Default::default() };
    let l = loss_total(m, &p, t, &only_2d(), 1.0).unwrap();
    assert!((l.l_2d - 3.5).abs() < 1e-12);
    assert!((l.total - 3.5).abs() < 1e-12);
}

#[test]
fn exact_targets_give_zero_and_weights_are_echoed() {
    let m = model();
    let s = sample(3.0, 2);
    let mut p = s.params.clone();
    p.beta.iter_mut().for_each(|b| *b = 0.0);
    let j3d = m.keypoints3d(&p).unwrap();
    let j2d = p.camera.project(&j3d).unwrap();
    let t = Targets { j2d: Some(&j2d), j3d: Some(&j3d), params: Some(&p) };
    let l = loss_total(m, &p, t, &LossWeights::default(), 1.0).unwrap();
    assert!(l.total.abs() < 1e-9, "{l:?}");
    assert_eq!(
        (l.weights.w_pm, l.weights.w_r, l.weights.w_2d, l.weights.w_3d),
        (20.0, 0.5, 6.0, 60.0)
    );
    assert!(matches!(loss_total(m, &p, Targets::default(), &LossWeights::default(), 1.0), Err(Error::Configuration(_))));
}

#[test]
fn rationality_hinge_and_shape() {
    let m = model();
    let mut p = FullParams::rest(m.dims(), true, weak());
    assert_eq!(rationality_penalty(m, &p, 1.0), 0.0);
    let knee = m.joint_tree.names.iter().position(|n| n == "l_knee").unwrap();
    let lim = m.angle_limits[knee].unwrap();
    p.theta_body[knee - 1] = [lim.max[0] + 0.1, 0.0, 0.0];
    assert!((rationality_penalty(m, &p, 1.0) - 0.01).abs() < 1e-12);
    let mut q = FullParams::rest(m.dims(), true, weak());
    q.beta[0] = 1.0;
    assert_eq!(rationality_penalty(m, &q, 1.0), 1.0);
    assert_eq!(rationality_penalty(m, &q, 2.5), 2.5);
}

fn random_state(rng: &mut ChaCha8Rng, kind: CameraKind, hands_pca: bool) -> FullParams {
    use rand::Rng;
    let m = model();
    let layout = m.layout(hands_pca);
    let v: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-0.4..0.4)).collect();
    let e = m.rest_extent();
    let camera = match kind {
        CameraKind::Weak => CameraModel::Weak(WeakPerspective { s: rng.random_range(200.0..400.0), t: [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)] }),
        CameraKind::D2s => CameraModel::D2s(D2s { s: rng.random_range(200.0..400.0), t: [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)], d: 3.0 * e }),
        CameraKind::Perspective => CameraModel::Perspective(Perspective {
            fx: rng.random_range(500.0..900.0),
            fy: rng.random_range(500.0..900.0),
            tc: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 3.0 * e],
        }),
    };
    FullParams::from_vec(layout, &v, camera).unwrap()
}

#[test]
fn loss_gradient_matches_central_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for kind in [CameraKind::Weak, CameraKind::D2s, CameraKind::Perspective] {
        for trial in 0..10 {
            let hands_pca = trial % 2 == 0;
            let gt = random_state(&mut rng, kind, hands_pca);
            let p = random_state(&mut rng, kind, hands_pca);
            let j3d = m.keypoints3d(&gt).unwrap();
            let j2d = gt.camera.project(&j3d).unwrap();
            let t = Targets { j2d: Some(&j2d), j3d: Some(&j3d), params: Some(&gt) };
            let w = LossWeights::default();
            let (_, g) = loss_gradient(m, &p, t, &w, 1.0).unwrap();
            let layout = p.layout(m.dims());
            let mut x = p.to_vec();
            x.extend(p.camera.params());
            let np = layout.len();
            let eval = |x: &[f64]| {
                let cam = CameraModel::from_params(kind, &x[np..]).unwrap();
                let q = FullParams::from_vec(layout, &x[..np], cam).unwrap();
                loss_total(m, &q, t, &w, 1.0).unwrap().total
            };
            for i in 0..x.len() {
                let h = 1e-6 * (1.0 + x[i].abs());
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                let err = (fd - g[i]).abs() / (fd.abs().max(g[i].abs()).max(1e-2));
                assert!(err < 1e-4, "{kind:?} trial {trial} param {i}: analytic {} vs fd {fd}", g[i]);
            }
        }
    }
}

#[test]
fn depth_gauge() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [CameraKind::Weak, CameraKind::D2s, CameraKind::Perspective] {
        let p = random_state(&mut rng, kind, true);
        let j3d = m.keypoints3d(&p).unwrap();
        let j2d = p.camera.project(&j3d).unwrap();
        let d = match p.camera {
            CameraModel::D2s(c) => c.d,
            CameraModel::Perspective(c) => c.tc[2],
            CameraModel::Weak(_) => 3.0 * m.rest_extent(),
        };
        let shifted = Keypoints3D::new(
            j3d.points.iter().map(|q| [q[0], q[1], q[2] + 0.1 * d]).collect(),
            j3d.parts.clone(),
        );
        let moved = p.camera.project(&shifted).unwrap();
        // the loss of the unshifted body against the shifted body's projection
        let t = Targets { j2d: Some(&moved), ..Default::default() };
        let l = loss_total(m, &p, t, &only_2d(), 1.0).unwrap().l_2d;
        if kind == CameraKind::Weak {
            assert_eq!(moved, j2d);
            assert_eq!(l, 0.0);
        } else {
            assert!(l > 1e-3, "{kind:?}: {l}");
        }
    }
}

fn body_errors(fit: &FitResult, s: &SyntheticSample) -> (f64, f64) {
    let m = model();
    let body = m.body_range();
    let pred = m.keypoints(&fit.params).unwrap();
    let gt: Vec<Vector3<f64>> = s.j3d.points[body.clone()].iter().map(|p| Vector3::from(*p)).collect();
    let e = sample_error(&pred[body], &gt, 0, true, None).unwrap();
    (e.mpjpe, e.pa_mpjpe)
}

#[test]
fn noiseless_d2s_fit_reprojects_perspective_data() {
    let s = sample(5.0, 1);
    let cfg = FitConfig { camera_kind: CameraKind::D2s, ..Default::default() };
    let fit = fit_frame(&s.j2d, model(), &cfg).unwrap();
    let (_, pa) = body_errors(&fit, &s);
    assert!(fit.losses.l_2d < 0.5, "{:?} {:?}", fit.losses, fit.diagnostics);
    assert!(pa < 25.0, "PA-MPJPE {pa} mm");
    assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn rest_pose_fit_stays_at_rest() {
    let m = model();
    let cam = CameraModel::Weak(WeakPerspective { s: 300.0, t: [10.0, 20.0] });
    let p = FullParams::rest(m.dims(), true, cam);
    let j2d = p.camera.project(&m.keypoints3d(&p).unwrap()).unwrap();
    let cfg = FitConfig { camera_kind: CameraKind::Weak, ..Default::default() };
    let fit = fit_frame(&j2d, m, &cfg).unwrap();
    assert!(fit.converged, "{:?}", fit.diagnostics);
    assert!(fit.losses.l_2d < 1e-3);
    let max = fit.params.to_vec().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(max < 1e-3, "pose moved by {max}");
}

#[test]
fn fits_are_deterministic_and_monotone() {
    let s = sample(2.0, 9);
    for kind in [CameraKind::Weak, CameraKind::Perspective] {
        let cfg = FitConfig { camera_kind: kind, stage2_iterations: 40, init_jitter: 0.01, seed: 5, ..Default::default() };
        let a = fit_frame(&s.j2d, model(), &cfg).unwrap();
        let b = fit_frame(&s.j2d, model(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.trace.last().unwrap() < &a.trace[0]);
    }
}

#[test]
fn too_few_body_keypoints() {
    let mut s = sample(3.0, 1);
    for (i, part) in s.j2d.parts.iter().enumerate() {
        if *part == Part::Body && i >= 3 {
            s.j2d.visible[i] = false;
        }
    }
    let r = fit_frame(&s.j2d, model(), &FitConfig::default());
    assert!(matches!(r, Err(Error::InsufficientKeypoints { visible: 3, required: 6 })));
}

#[test]
fn singleton_sweep() {
    let s = vec![sample(3.0, 0)];
    let cfg = FitConfig { stage2_iterations: 20, ..Default::default() };
    let kinds = [CameraKind::Weak, CameraKind::D2s];
    let rep = fit_sweep(model(), &s, &kinds, &cfg, Bucketing::Distance, 1).unwrap();
    for k in kinds {
        let row = rep.row(k, "3").unwrap();
        assert_eq!((row.n, row.failures), (1, 0));
        assert!(rep.row(k, "all").is_none());
    }
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("camera_kind,bucket,n,mpjpe,pa_mpjpe,mean_L2D,failures\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn sweep_counts_failures() {
    let mut s = sample(3.0, 0);
    s.j2d.visible.iter_mut().for_each(|v| *v = false);
    let rep = fit_sweep(model(), &[s], &[CameraKind::Weak], &FitConfig::default(), Bucketing::Viewpoint, 1).unwrap();
    let row = &rep.rows[0];
    assert_eq!((row.n, row.failures), (0, 1));
    assert!(row.mpjpe.is_nan());
    assert!(rep.records[0].error.as_deref().unwrap().starts_with("insufficient_keypoints"));
}
