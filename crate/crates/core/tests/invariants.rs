use monodetr::config::{BinMode, DepthDecode};
use monodetr::depth::DepthBinSpec;
use monodetr::eval::{bev_iou, iou3d, Box3D};
use monodetr::matcher::hungarian;
use proptest::prelude::*;

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=5, 0usize..=6).prop_flat_map(|(rows, extra)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, rows + extra), rows)
    })
}

fn a_box() -> impl Strategy<Value = Box3D> {
    (-3.0f64..3.0, 0.5f64..2.0, 5.0f64..12.0, 0.5f64..3.0, 0.5f64..3.0, 0.5f64..5.0, -3.2f64..3.2).prop_map(
        |(x, y, z, h, w, l, heading)| Box3D { center: [x, y, z], dims: [h, w, l], heading },
    )
}

fn bin_mode() -> impl Strategy<Value = BinMode> {
    prop_oneof![Just(BinMode::Lid), Just(BinMode::Ud), Just(BinMode::Sid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn assignment_is_injective_and_complete(c in cost_matrix()) {
        let a = hungarian(&c).unwrap();
        prop_assert_eq!(a.pairs.len(), c.len());
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), c.len());
        let sum: f64 = a.pairs.iter().map(|&(r, q)| c[r][q]).sum();
        prop_assert!((sum - a.total_cost).abs() < 1e-9);
    }

    #[test]
    fn row_offsets_shift_the_optimum_only(c in cost_matrix(), offset in -10.0f64..10.0) {
        let base = hungarian(&c).unwrap();
        let shifted: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| v + offset).collect()).collect();
        let moved = hungarian(&shifted).unwrap();
        prop_assert!((moved.total_cost - base.total_cost - offset * c.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn positive_scaling_scales_the_optimum(c in cost_matrix(), k in 0.1f64..10.0) {
        let base = hungarian(&c).unwrap();
        let scaled: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let s = hungarian(&scaled).unwrap();
        prop_assert!((s.total_cost - k * base.total_cost).abs() < 1e-9 * (1.0 + k * base.total_cost.abs()));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in a_box(), b in a_box()) {
        for f in [bev_iou, iou3d] {
            let ab = f(&a, &b);
            prop_assert!((ab - f(&b, &a)).abs() < 1e-9);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_ignores_a_half_turn(a in a_box(), b in a_box()) {
        let turned = Box3D { heading: a.heading + std::f64::consts::PI, ..a };
        prop_assert!((iou3d(&a, &b) - iou3d(&turned, &b)).abs() < 1e-9);
    }

    #[test]
    fn bin_index_is_monotone(mode in bin_mode(), k in 1usize..100, x in 0.0f64..80.0, y in 0.0f64..80.0) {
        let spec = DepthBinSpec::new(0.0, 80.0, k, mode).unwrap();
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(spec.bin_index(lo).unwrap() <= spec.bin_index(hi).unwrap());
    }

    #[test]
    fn bin_starts_round_trip(mode in bin_mode(), k in 1usize..100) {
        let spec = DepthBinSpec::new(0.0, 80.0, k, mode).unwrap();
        for i in 0..k {
            prop_assert_eq!(spec.bin_index(spec.bin_start(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn expected_depth_stays_in_range(mode in bin_mode(), raw in prop::collection::vec(0.0f64..1.0, 17)) {
        let spec = DepthBinSpec::new(0.0, 80.0, 16, mode).unwrap();
        let total: f64 = raw.iter().map(|p| p + 1e-3).sum();
        let probs: Vec<f64> = raw.iter().map(|p| (p + 1e-3) / total).collect();
        for decode in [DepthDecode::Weighted, DepthDecode::Argmax] {
            let d = spec.expected_depth(&probs, decode).unwrap();
            prop_assert!((0.0..=80.0).contains(&d));
        }
    }
}
