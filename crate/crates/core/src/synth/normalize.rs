//! Per-part scale normalization of 2D keypoints: subtract the mean of the
//! part's visible keypoints, then divide by the larger half side of their
//! bounding box. Because the centre is the mean and not the box centre,
//! normalized coordinates lie in `[-2, 2]`.

use serde::{Deserialize, Serialize};

use crate::metrics::mean;
use crate::projection::{Keypoints2D, Part};

/// Floor on the half-extent divisor, pixels.
pub const BBOX_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub part: Part,
    pub center: [f64; 2],
    pub half_extent: f64,
    /// No visible keypoint: the part's outputs are zeros.
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedKeypoints {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub parts: Vec<Part>,
    pub records: Vec<PartRecord>,
}

impl NormalizedKeypoints {
    pub fn record(&self, part: Part) -> Option<&PartRecord> {
        self.records.iter().find(|r| r.part == part)
    }

    /// Coordinates of one part in keypoint order, invisible ones as zeros.
    pub fn part_points(&self, part: Part) -> Vec<[f64; 2]> {
        self.points.iter().zip(&self.parts).filter(|(_, p)| **p == part).map(|(x, _)| *x).collect()
    }
}

pub fn scale_normalize(j2d: &Keypoints2D) -> NormalizedKeypoints {
    let mut points = vec![[0.0; 2]; j2d.len()];
    let mut records = Vec::new();
    for part in Part::ALL {
        let members: Vec<usize> = (0..j2d.len()).filter(|&i| j2d.parts[i] == part).collect();
        if members.is_empty() {
            continue;
        }
        let vis: Vec<usize> = members.iter().copied().filter(|&i| j2d.visible[i]).collect();
        if vis.is_empty() {
            records.push(PartRecord { part, center: [0.0; 2], half_extent: 1.0, absent: true });
            continue;
        }
        let xs: Vec<f64> = vis.iter().map(|&i| j2d.points[i][0]).collect();
        let ys: Vec<f64> = vis.iter().map(|&i| j2d.points[i][1]).collect();
        let center = [mean(&xs), mean(&ys)];
        let span = |v: &[f64]| {
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
            (hi - lo) / 2.0
        };
        let half_extent = span(&xs).max(span(&ys)).max(BBOX_EPS);
        for &i in &vis {
            points[i] = [
                (j2d.points[i][0] - center[0]) / half_extent,
                (j2d.points[i][1] - center[1]) / half_extent,
            ];
        }
        records.push(PartRecord { part, center, half_extent, absent: false });
    }
    NormalizedKeypoints { points, visible: j2d.visible.clone(), parts: j2d.parts.clone(), records }
}

/// Inverse of [`scale_normalize`] on visible keypoints (invisible ones stay zero).
pub fn denormalize(n: &NormalizedKeypoints) -> Keypoints2D {
    let points = n
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| match n.record(n.parts[i]) {
            Some(r) if n.visible[i] && !r.absent => {
                [p[0] * r.half_extent + r.center[0], p[1] * r.half_extent + r.center[1]]
            }
            _ => [0.0; 2],
        })
        .collect();
    Keypoints2D { points, visible: n.visible.clone(), parts: n.parts.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(points: Vec<[f64; 2]>, parts: Vec<Part>) -> Keypoints2D {
        let visible = vec![true; points.len()];
        Keypoints2D { points, visible, parts }
    }

    #[test]
    fn unit_square() {
        let j = kp(vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]], vec![Part::Body; 4]);
        let n = scale_normalize(&j);
        let r = n.record(Part::Body).unwrap();
        assert_eq!(r.center, [1.0, 1.0]);
        assert_eq!(r.half_extent, 1.0);
        assert_eq!(n.points, vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn single_point_and_absent_part() {
        let mut j = kp(vec![[5.0, 7.0], [1.0, 1.0], [2.0, 3.0]], vec![Part::Body, Part::Face, Part::Face]);
        j.visible[1] = false;
        j.visible[2] = false;
        let n = scale_normalize(&j);
        assert_eq!(n.points[0], [0.0, 0.0]);
        assert_eq!(n.record(Part::Body).unwrap().half_extent, BBOX_EPS);
        let face = n.record(Part::Face).unwrap();
        assert!(face.absent);
        assert_eq!(n.points[1], [0.0, 0.0]);
        assert!(n.record(Part::LeftHand).is_none());
    }

    fn arb_keypoints() -> impl Strategy<Value = Keypoints2D> {
        prop::collection::vec((prop::array::uniform2(-500.0f64..500.0), 0usize..4, prop::bool::weighted(0.85)), 1..40)
            .prop_map(|v| Keypoints2D {
                points: v.iter().map(|x| x.0).collect(),
                parts: v.iter().map(|x| Part::ALL[x.1]).collect(),
                visible: v.iter().map(|x| x.2).collect(),
            })
    }

    proptest! {
        #[test]
        fn inversion_round_trips(j in arb_keypoints()) {
            let back = denormalize(&scale_normalize(&j));
            for i in 0..j.len() {
                if j.visible[i] {
                    prop_assert!((back.points[i][0] - j.points[i][0]).abs() <= 1e-12 * (1.0 + j.points[i][0].abs()));
                    prop_assert!((back.points[i][1] - j.points[i][1]).abs() <= 1e-12 * (1.0 + j.points[i][1].abs()));
                }
            }
        }

        #[test]
        fn normalized_values_stay_in_range(j in arb_keypoints()) {
            let n = scale_normalize(&j);
            prop_assert!(n.points.iter().flatten().all(|c| c.abs() <= 2.0 + 1e-12));
        }

        #[test]
        fn power_of_two_scaling_is_exact(j in arb_keypoints(), k in -6i32..6) {
            let a = 2f64.powi(k);
            let mut scaled = j.clone();
            scaled.points.iter_mut().flatten().for_each(|c| *c *= a);
            let (n0, n1) = (scale_normalize(&j), scale_normalize(&scaled));
            // the bbox floor breaks exactness for single-point parts only
            for r0 in &n0.records {
                if r0.half_extent > BBOX_EPS * 64.0 {
                    for q in 0..j.len() {
                        if j.parts[q] == r0.part {
                            prop_assert_eq!(n0.points[q], n1.points[q]);
                        }
                    }
                }
            }
        }

        #[test]
        fn similarity_invariance(j in arb_keypoints(), a in 0.01f64..50.0, b in prop::array::uniform2(-1000.0f64..1000.0)) {
            let mut moved = j.clone();
            moved.points.iter_mut().for_each(|p| { p[0] = a * p[0] + b[0]; p[1] = a * p[1] + b[1]; });
            let (n0, n1) = (scale_normalize(&j), scale_normalize(&moved));
            for (r0, r1) in n0.records.iter().zip(&n1.records) {
                if r0.half_extent > BBOX_EPS * 64.0 && r1.half_extent > BBOX_EPS * 64.0 {
                    // rounding of the shifted inputs, relative to the part's size
                    let tol = 1e-12 * (1.0 + (500.0 + (b[0].abs() + b[1].abs()) / a) / r0.half_extent);
                    for q in 0..j.len() {
                        if j.parts[q] == r0.part {
                            prop_assert!((n0.points[q][0] - n1.points[q][0]).abs() < tol);
                            prop_assert!((n0.points[q][1] - n1.points[q][1]).abs() < tol);
                        }
                    }
                }
            }
        }
    }
}
