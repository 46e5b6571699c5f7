use super::train::batch_gradient;
use super::*;
use crate::bodymodel::ToyModelConfig;
use crate::rotation::rodrigues;
use crate::synth::{generate_dataset, BankConfig, CameraSamplerConfig, ParameterBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::Vector3;
use std::sync::OnceLock;

fn model() -> &'static BodyModel {
    static MODEL: OnceLock<BodyModel> = OnceLock::new();
    MODEL.get_or_init(|| BodyModel::toy(&ToyModelConfig::default(), 0).unwrap())
}

fn samples(n: usize, seed: u64) -> Vec<SyntheticSample> {
    let bank = ParameterBank::procedural(model(), &BankConfig { body_poses: 50, hand_poses: 50, ..Default::default() }, 2).unwrap();
    generate_dataset(model(), &bank, &CameraSamplerConfig::default(), n, seed).unwrap()
}

fn small() -> RegressorConfig {
    RegressorConfig { global_hidden: vec![16, 12], gcn_widths: vec![6, 5, 5, 4], face_hidden: vec![7] }
}

fn zeroed(mut r: Regressor) -> Regressor {
    r.slices_mut().into_iter().flatten().for_each(|v| *v = 0.0);
    r
}

#[test]
fn graphs_cover_every_node() {
    let m = model();
    let hand = hand_edges(m);
    assert_eq!(hand.len(), 5 * 2 + 4);
    let face = face_edges(m).unwrap();
    assert_eq!(face.len(), 8 + 8 + 8 + 8);
    for (n, edges) in [(15, &hand), (17, &face)] {
        let mut seen = vec![false; n];
        for (a, b) in edges.iter() {
            seen[*a] = true;
            seen[*b] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }
}

#[test]
fn zero_weights_give_biases() {
    let m = model();
    let mut r = zeroed(Regressor::new(m, &small(), 0).unwrap());
    let s = &samples(1, 0)[0];
    let norm = scale_normalize(&s.j2d);
    assert!(r.forward_partial(&norm, Part::LeftHand).unwrap().iter().all(|v| *v == 0.0));
    assert!(r.forward_partial(&norm, Part::Face).unwrap().iter().all(|v| *v == 0.0));
    let last = r.global.layers.len() - 1;
    let n = r.global.layers[last].b.len();
    for i in 0..n {
        r.global.layers[last].b[i] = 0.1 * i as f64 - 3.0;
    }
    let g = r.forward_global(m, &norm).unwrap();
    let b = &r.global.layers[last].b;
    assert_eq!(g.beta[0], b[0]);
    assert_eq!(g.theta_body[0], [b[10], b[11], b[12]]);
    assert_eq!(g.camera.s, (1.0 + b[n - 4].exp()).ln());
    assert!((g.camera.d - (1.0 + b[n - 1].exp()).ln()).abs() < 1e-15);
}

#[test]
fn forward_is_deterministic_and_similarity_invariant() {
    let m = model();
    let r = Regressor::new(m, &RegressorConfig::default(), 4).unwrap();
    let s = &samples(1, 3)[0];
    let a = r.predict_params(m, &s.j2d).unwrap();
    assert_eq!(a, r.predict_params(m, &s.j2d).unwrap());
    let mut scaled = s.j2d.clone();
    scaled.points.iter_mut().flatten().for_each(|c| *c *= 4.0);
    assert_eq!(a, r.predict_params(m, &scaled).unwrap());
    let mut moved = s.j2d.clone();
    moved.points.iter_mut().for_each(|p| {
        p[0] = 2.7 * p[0] + 311.0;
        p[1] = 2.7 * p[1] - 45.5;
    });
    let b = r.predict_params(m, &moved).unwrap();
    let diff = a.to_vec().iter().zip(b.to_vec()).fold(0.0f64, |d, (x, y)| d.max((x - y).abs()));
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn absent_parts() {
    let m = model();
    let r = Regressor::new(m, &small(), 0).unwrap();
    let mut s = samples(1, 0).remove(0);
    for (v, p) in s.j2d.visible.iter_mut().zip(&s.j2d.parts) {
        if *p == Part::LeftHand {
            *v = false;
        }
    }
    let norm = scale_normalize(&s.j2d);
    assert!(matches!(r.forward_partial(&norm, Part::LeftHand), Err(Error::AbsentPart(_))));
    let p = r.predict_params(m, &s.j2d).unwrap();
    assert!(matches!(p.hands, HandParams::Pca { ref left, .. } if left.iter().all(|v| *v == 0.0)));
    s.j2d.visible.iter_mut().for_each(|v| *v = false);
    assert!(matches!(r.predict_params(m, &s.j2d), Err(Error::AbsentPart(_))));
}

#[test]
fn sts_loss_oracle() {
    let m = model();
    let s = &samples(1, 5)[0];
    assert!(sts_training_loss(&s.params, s, m, 20.0, 60.0).unwrap() < 1e-20);

    let mut pred = s.params.clone();
    let delta = 0.3;
    if let HandParams::Pca { left, .. } = &mut pred.hands {
        left[2] += delta;
    }
    let (a, b) = (m.joint_axis_angles(&pred), m.joint_axis_angles(&s.params));
    let mut sq = 0.0;
    for (wa, wb) in a.iter().zip(&b) {
        sq += (rodrigues(&(*wa).into()) - rodrigues(&(*wb).into())).norm_squared();
    }
    let l_pm = sq / (9 * m.n_joints() + 20) as f64;
    let q = m.keypoints(&pred).unwrap();
    let l_3d: f64 = q
        .iter()
        .zip(&s.j3d.points)
        .map(|(p, g)| (p - Vector3::from(*g)).norm_squared())
        .sum::<f64>()
        / (3 * q.len()) as f64;
    let got = sts_training_loss(&pred, s, m, 20.0, 60.0).unwrap();
    assert!(l_pm > 0.0 && l_3d > 0.0);
    assert!((got - (20.0 * l_pm + 60.0 * l_3d)).abs() < 1e-12 * got.max(1.0), "{got}");
    let cfg = TrainConfig::default();
    assert_eq!((cfg.w_pm, cfg.w_3d), (20.0, 60.0));
}

#[test]
fn weight_gradient_matches_central_differences() {
    let m = model();
    let data = samples(2, 8);
    let batch: Vec<&SyntheticSample> = data.iter().collect();
    let cfg = TrainConfig { regressor: small(), ..Default::default() };
    let reg = Regressor::new(m, &small(), 1).unwrap();
    let objs = [Objective::Full];
    let (_, grad) = batch_gradient(&reg, m, &batch, &objs, &cfg).unwrap();
    let loss = |r: &Regressor| batch_gradient(r, m, &batch, &objs, &cfg).unwrap().0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gslices = grad.slices();
    let mut probes = 0;
    for (k, g) in gslices.iter().enumerate() {
        for _ in 0..5 {
            let i = rng.random_range(0..g.len());
            let eps = 1e-6;
            let (mut a, mut b) = (reg.clone(), reg.clone());
            a.slices_mut()[k][i] += eps;
            b.slices_mut()[k][i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(err < 1e-3, "array {k} entry {i}: analytic {} vs fd {fd}", g[i]);
            probes += 1;
        }
    }
    assert_eq!(probes, 5 * gslices.len());
}

#[test]
fn zero_rate_and_determinism() {
    let m = model();
    let data = samples(1, 1);
    let cfg = TrainConfig { lr: 0.0, phase1_epochs: 1, phase2_epochs: 1, val_fraction: 0.0, regressor: small(), ..Default::default() };
    let out = train(m, &data, &cfg).unwrap();
    assert_eq!(out.regressor, Regressor::new(m, &small(), cfg.seed).unwrap());
    let cfg = TrainConfig { lr: 1e-3, ..cfg };
    let (a, b) = (train(m, &data, &cfg).unwrap(), train(m, &data, &cfg).unwrap());
    assert_ne!(a.regressor, out.regressor);
    assert_eq!(a.regressor, b.regressor);
    let losses = |o: &TrainOutcome| o.curve.iter().map(|c| c.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn one_epoch_bookkeeping() {
    let m = model();
    let data = samples(16, 2);
    let cfg = TrainConfig { phase1_epochs: 1, phase2_epochs: 0, val_fraction: 0.0, regressor: small(), ..Default::default() };
    let out = train(m, &data, &cfg).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.curve.len(), 1);
    assert!(out.curve[0].val_loss.is_nan());
    let mut csv = Vec::new();
    out.write_curve_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("epoch,phase,train_loss,val_loss\n1,1,"));
    assert!(matches!(train(m, &[], &cfg), Err(Error::Configuration(_))));
}

struct Oracle(Vec<SyntheticSample>);

impl ParamPredictor for Oracle {
    fn predict(&self, _: &BodyModel, j2d: &Keypoints2D) -> Result<FullParams> {
        Ok(self.0.iter().find(|s| &s.j2d == j2d).expect("known sample").params.clone())
    }
}

#[test]
fn evaluation_of_an_oracle_is_exact() {
    let m = model();
    let data = samples(4, 6);
    let rep = evaluate(&Oracle(data.clone()), m, &data, Some(Bucketing::Viewpoint)).unwrap();
    assert!(rep.mpjpe < 1e-9 && rep.pa_mpjpe < 1e-6, "{rep:?}");
    assert_eq!(rep.buckets.iter().map(|b| b.n).sum::<usize>(), 4);
    assert!(matches!(evaluate(&Oracle(data), m, &[], None), Err(Error::EmptyEvaluation)));
}

#[test]
fn weights_round_trip() {
    let m = model();
    let r = Regressor::new(m, &small(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    save_weights(&r, &path).unwrap();
    assert_eq!(load_weights(&path, m).unwrap(), r);
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(Regressor::from_json(&text, m), Err(Error::Version { found: 9, .. })));
    let mut bad = r.clone();
    bad.hand.gcn.a_hat[(0, 1)] += 0.5;
    assert!(Regressor::from_json(&bad.to_json().unwrap(), m).is_err());
}

#[test]
fn mirrored_hands_share_coefficients() {
    let m = model();
    let mut p = FullParams::rest(m.dims(), true, CameraModel::Weak(crate::projection::WeakPerspective { s: 1.0, t: [0.0; 2] }));
    let coeffs = vec![0.7, -0.4, 0.2, 0.5, -0.3, 0.1];
    p.hands = HandParams::Pca { left: coeffs.clone(), right: coeffs };
    let q = m.keypoints(&p).unwrap();
    let (l, r) = (m.hand_range(Part::LeftHand), m.hand_range(Part::RightHand));
    let (lw, rw) = (m.joint_tree.parents[l.start].unwrap(), m.joint_tree.parents[r.start].unwrap());
    for (i, j) in l.zip(r) {
        let (a, b) = (q[i] - q[lw], q[j] - q[rw]);
        assert!((a.x + b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12 && (a.z - b.z).abs() < 1e-12, "{a} {b}");
    }
}
