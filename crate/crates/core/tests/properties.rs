//! Property tests over the numeric invariants of the grid and geometry code.

use depthreg_core::depth_map::{DepthMap, GridGeometry};
use depthreg_core::geometry::{normalize_angle, rotation};
use depthreg_core::problem::SmoothingPattern;
use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use proptest::prelude::*;

fn arbitrary_map() -> impl Strategy<Value = DepthMap> {
    (2usize..12, 2usize..12, 0.01f64..2.0).prop_flat_map(|(rows, cols, resolution)| {
        proptest::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |values| DepthMap {
            geometry: GridGeometry {
                rows,
                cols,
                resolution,
                origin: Vector2::new(-1.0, 0.5),
            },
            values: DMatrix::from_fn(rows, cols, |m, n| values[m * cols + n]),
            observed: DMatrix::from_element(rows, cols, true),
            obs_count: DMatrix::from_element(rows, cols, 1),
        })
    })
}

proptest! {
    #[test]
    fn bilinear_weights_partition_unity(map in arbitrary_map(), fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let q = Vector2::new(
            fx * (map.geometry.rows - 1) as f64,
            fy * (map.geometry.cols - 1) as f64,
        );
        let loc = map.locate(q).unwrap();
        let sum: f64 = loc.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for &w in &loc.weights {
            prop_assert!((-1e-15..=1.0 + 1e-15).contains(&w));
        }
    }

    #[test]
    fn interpolation_reproduces_affine_fields(
        rows in 2usize..10,
        cols in 2usize..10,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        c in -5.0f64..5.0,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        let map = DepthMap {
            geometry: GridGeometry { rows, cols, resolution: 1.0, origin: Vector2::zeros() },
            values: DMatrix::from_fn(rows, cols, |m, n| a * m as f64 + b * n as f64 + c),
            observed: DMatrix::from_element(rows, cols, true),
            obs_count: DMatrix::from_element(rows, cols, 1),
        };
        let q = Vector2::new(fx * (rows - 1) as f64, fy * (cols - 1) as f64);
        let expected = a * q.x + b * q.y + c;
        prop_assert!((map.interpolate(q).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rotation_stays_orthonormal(rx in -10.0f64..10.0, ry in -10.0f64..10.0, rz in -10.0f64..10.0) {
        let r = rotation(&Vector3::new(rx, ry, rz));
        prop_assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_angles_stay_in_half_open_interval(a in -1e4f64..1e4) {
        let n = normalize_angle(a);
        prop_assert!(n > -std::f64::consts::PI && n <= std::f64::consts::PI);
        prop_assert!((n.sin() - a.sin()).abs() < 1e-8);
        prop_assert!((n.cos() - a.cos()).abs() < 1e-8);
    }

    #[test]
    fn smoothing_pair_count_formula(rows in 2usize..40, cols in 2usize..40) {
        let pattern = SmoothingPattern::new(rows, cols);
        prop_assert_eq!(pattern.len(), 2 * rows * cols - rows - cols);
    }
}
