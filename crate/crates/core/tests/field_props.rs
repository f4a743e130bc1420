//! Time encoding and velocity-field properties.

use perimotion::neural_field::{encode_time, FieldConfig, VelocityFieldModel};
use proptest::prelude::*;

fn small(time_encoding: bool) -> FieldConfig {
    FieldConfig {
        hidden_layers: 2,
        hidden_width: 16,
        omega: 6.0,
        period: 1.0,
        time_encoding,
    }
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

proptest! {
    #[test]
    fn encoding_lies_on_unit_circle(t in -10.0f64..10.0, period in 0.1f64..5.0) {
        let (c, s) = encode_time(t, period).unwrap();
        prop_assert!((c * c + s * s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn encoding_is_exactly_periodic(t in 0.0f64..1.0, k in -3i32..4, period in 0.25f64..4.0) {
        let base = encode_time(t * period, period).unwrap();
        let shifted = encode_time(t * period + k as f64 * period, period).unwrap();
        prop_assert_eq!(base, shifted);
    }

    #[test]
    fn encoding_matches_trigonometry(t in 0.0f64..1.0) {
        let (c, s) = encode_time(t, 1.0).unwrap();
        let a = std::f64::consts::TAU * t;
        prop_assert!((c - a.cos()).abs() < 1e-8 && (s - a.sin()).abs() < 1e-8);
    }

    #[test]
    fn encoded_model_is_periodic_in_time(seed in 0u64..50, p in point(), t in 0.0f64..1.0) {
        let m = VelocityFieldModel::<f32>::init(seed, &small(true)).unwrap();
        let q = [p.map(|c| c as f32)];
        prop_assert_eq!(m.velocity(&q, t).unwrap(), m.velocity(&q, t + 1.0).unwrap());
    }

    #[test]
    fn velocity_is_spatially_continuous(seed in 0u64..50, p in point(), dir in point(), t in 0.0f64..1.0) {
        let m = VelocityFieldModel::<f64>::init(seed, &small(true)).unwrap();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-3);
        let delta = 1e-6;
        let q = [0, 1, 2].map(|d| p[d] + delta * dir[d] / norm);
        let v = m.velocity(&[p, q], t).unwrap();
        let change = (0..3).map(|d| (v[0][d] - v[1][d]).powi(2)).sum::<f64>().sqrt();
        // the initialized network's spatial Lipschitz constant is far below 100
        prop_assert!(change <= 100.0 * delta, "change {change}");
    }

    #[test]
    fn batching_is_elementwise(seed in 0u64..50, pts in prop::collection::vec(point(), 1..20), t in 0.0f64..1.0) {
        let m = VelocityFieldModel::<f32>::init(seed, &small(true)).unwrap();
        let q: Vec<[f32; 3]> = pts.iter().map(|p| p.map(|c| c as f32)).collect();
        let batch = m.velocity(&q, t).unwrap();
        for (p, v) in q.iter().zip(&batch) {
            prop_assert_eq!(m.velocity(&[*p], t).unwrap()[0], *v);
        }
    }
}

#[test]
fn raw_time_model_is_not_periodic() {
    let m = VelocityFieldModel::<f64>::init(1, &small(false)).unwrap();
    let p = [[0.2, -0.1, 0.4]];
    assert_ne!(m.velocity(&p, 0.0).unwrap(), m.velocity(&p, 1.0).unwrap());
    assert_eq!(m.input_width(), 4);
    assert_eq!(VelocityFieldModel::<f64>::init(1, &small(true)).unwrap().input_width(), 5);
}
