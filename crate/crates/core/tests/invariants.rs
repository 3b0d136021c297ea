mod common;

use common::random_flow;
use contra::conformal::{calibrate_scores, conformal_rank, conformal_radius, region_boundary, LatentCalibration, Threshold};
use contra::data::{check_disjoint, split, SplitSizes, SplitSpec, Standardizer};
use contra::flow::gaussian_matrix;
use contra::geometry::ball_volume;
use contra::mcqr::{box_from_bands, score_from_bands, WeightVector};
use contra::rng::derive_for_point;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #[test]
    fn splits_partition_the_rows(n in 3usize..400, a in 0.1f64..1.0, b in 0.1f64..1.0, c in 0.1f64..1.0, seed in any::<u64>()) {
        let spec = SplitSpec { sizes: SplitSizes::Ratios { train: a, calibration: b, test: c }, seed, predictor_fraction: None };
        let s = split(n, &spec).unwrap();
        prop_assert!(check_disjoint(&[&s.train, &s.calibration, &s.test]).is_ok());
        let mut all: Vec<usize> = s.train.iter().chain(&s.calibration).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, &spec).unwrap(), s);
    }

    #[test]
    fn rank_is_the_smallest_valid_order_statistic(n in 1usize..2000, alpha in 0.001f64..0.999) {
        match conformal_rank(n, alpha).unwrap() {
            Some(k) => {
                prop_assert!(k >= 1 && k <= n);
                let need = (1.0 - alpha) * (n as f64 + 1.0);
                prop_assert!(k as f64 >= need - 1e-9 * need);
                prop_assert!((k as f64 - 1.0) < need);
            }
            None => prop_assert!((1.0 - alpha) * (n as f64 + 1.0) > n as f64),
        }
    }

    #[test]
    fn threshold_admits_enough_calibration_scores(scores in prop::collection::vec(0.0f64..100.0, 1..300), alpha in 0.01f64..0.99) {
        let n = scores.len();
        match calibrate_scores(&scores, alpha).unwrap() {
            Threshold::Bounded(t) => {
                prop_assert!(scores.contains(&t));
                let admitted = scores.iter().filter(|s| **s <= t).count();
                prop_assert!(admitted as f64 >= ((1.0 - alpha) * (n as f64 + 1.0)).ceil() - 1e-9);
            }
            Threshold::Unbounded => prop_assert!(conformal_rank(n, alpha).unwrap().is_none()),
        }
    }

    #[test]
    fn lower_miscoverage_never_shrinks_the_ball(n in 20usize..300, a1 in 0.02f64..0.9, a2 in 0.02f64..0.9, seed in any::<u64>()) {
        let cal = LatentCalibration::from_latents(gaussian_matrix(n, 2, seed));
        let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let r_lo = conformal_radius(&cal, lo).unwrap().radius;
        let r_hi = conformal_radius(&cal, hi).unwrap().radius;
        match (r_lo, r_hi) {
            (Threshold::Bounded(a), Threshold::Bounded(b)) => prop_assert!(a >= b),
            (Threshold::Bounded(_), Threshold::Unbounded) => prop_assert!(false, "larger alpha gave unbounded"),
            _ => {}
        }
    }

    #[test]
    fn boundary_maps_back_to_the_sphere(seed in any::<u64>(), q in 2usize..4, r in 0.2f64..3.0, x in -2.0f64..2.0) {
        let flow = random_flow(q, 1, 6, seed, 0.3);
        let cal = LatentCalibration::from_latents(Array2::from_elem((9, q), r / (q as f64).sqrt()));
        let ball = conformal_radius(&cal, 0.1).unwrap();
        let b = region_boundary(&flow, &ball, &[x], 32, seed).unwrap();
        let (z, _) = flow.inverse_batch(b.points.view(), Array2::from_elem((1, 1), x).view()).unwrap();
        for row in z.rows() {
            prop_assert!((row.dot(&row).sqrt() - r).abs() < 1e-6);
        }
    }

    #[test]
    fn mcqr_membership_is_score_below_threshold(
        lower in prop::collection::vec(-5.0f64..0.0, 2),
        width in prop::collection::vec(0.0f64..5.0, 2),
        w in prop::collection::vec(0.1f64..10.0, 4),
        y in prop::collection::vec(-10.0f64..10.0, 2),
        s in -1.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let upper: Vec<f64> = lower.iter().zip(&width).map(|(l, d)| l + d).collect();
        let weights = WeightVector { lower: w[..2].to_vec(), upper: w[2..].to_vec() };
        let b = box_from_bands(&lower, &upper, &weights, Threshold::Bounded(s));
        let score = score_from_bands(&lower, &upper, &y, &weights);
        if (score - s).abs() > 1e-9 {
            prop_assert_eq!(b.contains(&y), score <= s);
        }
        // scaling the weights and the threshold together leaves the box unchanged
        let b2 = box_from_bands(&lower, &upper, &weights.scaled(scale), Threshold::Bounded(s * scale));
        for (u, v) in b.lower.iter().chain(&b.upper).zip(b2.lower.iter().chain(&b2.upper)) {
            prop_assert!((u - v).abs() < 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn point_seeds_are_stable(root in any::<u64>(), p in prop::collection::vec(-1e6f64..1e6, 1..5)) {
        prop_assert_eq!(derive_for_point(root, &p), derive_for_point(root, &p.clone()));
    }

    #[test]
    fn standardizer_round_trips(seed in any::<u64>(), n in 2usize..50) {
        let data = gaussian_matrix(n, 3, seed) * 7.0 + 2.0;
        let rows: Vec<usize> = (0..n).collect();
        let s = Standardizer::fit_lenient(data.view(), &rows).unwrap();
        let back = s.inverse(s.transform(data.view()).view());
        for (a, b) in back.iter().zip(data.iter()) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn ball_volumes_follow_the_recursion() {
    for q in 1..8 {
        let ratio = ball_volume(q + 2, 1.0) / ball_volume(q, 1.0);
        assert!((ratio - 2.0 * std::f64::consts::PI / (q as f64 + 2.0)).abs() < 1e-12);
    }
}
