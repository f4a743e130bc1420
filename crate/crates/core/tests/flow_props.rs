//! Euler integration properties over randomized seeds and grids.

use perimotion::flow::{deform_mesh, integrate, integrate_grid, uniform_grid, PointwiseField};
use perimotion::mesh::TriangleMesh;
use perimotion::neural_field::{FieldConfig, VelocityFieldModel};
use perimotion::training::{objective_value, sample_points, ObjectiveConfig, Sampling};
use perimotion::volume::{make_sphere_series, DomainNormalizer, GrowthKind, SphereSeriesConfig};
use proptest::prelude::*;

fn seeds() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0], 1..16)
}

fn model(seed: u64) -> VelocityFieldModel<f64> {
    let cfg = FieldConfig {
        hidden_layers: 2,
        hidden_width: 8,
        omega: 6.0,
        period: 1.0,
        time_encoding: true,
    };
    VelocityFieldModel::init(seed, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_field_moves_by_c_times_t(p in seeds(), c in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0], steps in 1usize..50) {
        let f = PointwiseField(move |_, _| c);
        let end = integrate(&f, &p, 0.0, 1.0, steps).unwrap().end().to_vec();
        for (q, s) in end.iter().zip(&p) {
            prop_assert!((0..3).all(|d| (q[d] - (s[d] + c[d])).abs() <= 1e-12));
        }
    }

    #[test]
    fn linear_field_follows_discrete_exponential(p in seeds(), steps in 1usize..100) {
        let f = PointwiseField(|x: [f64; 3], _| x);
        let g = (1.0 + 1.0 / steps as f64).powi(steps as i32);
        let end = integrate(&f, &p, 0.0, 1.0, steps).unwrap().end().to_vec();
        for (q, s) in end.iter().zip(&p) {
            prop_assert!((0..3).all(|d| (q[d] - g * s[d]).abs() <= 1e-12 * (1.0 + s[d].abs())));
        }
    }

    #[test]
    fn composition_on_shared_grid_is_bit_identical(p in seeds(), seed in 0u64..20, steps in 2usize..30, cut in 1usize..29) {
        prop_assume!(cut < steps);
        let m = model(seed);
        let grid = uniform_grid(0.0, 1.0, steps).unwrap();
        let full = integrate_grid(&m, &p, &grid).unwrap();
        let head = integrate_grid(&m, &p, &grid[..=cut]).unwrap();
        let tail = integrate_grid(&m, head.end(), &grid[cut..]).unwrap();
        prop_assert_eq!(tail.end(), full.end());
    }

    #[test]
    fn trajectories_start_at_the_seeds(p in seeds(), seed in 0u64..20, steps in 1usize..10) {
        let tr = integrate(&model(seed), &p, 0.0, 1.0, steps).unwrap();
        prop_assert_eq!(tr.at_step(0), &p[..]);
        prop_assert_eq!(tr.steps(), steps);
    }

    #[test]
    fn deformation_keeps_faces(seed in 0u64..20, t in 0.0f64..1.0, steps in 1usize..10) {
        let mesh = TriangleMesh::icosphere(2, 0.5, [0.1, -0.2, 0.0]);
        let n = DomainNormalizer::new([-1.0; 3], [1.0; 3]);
        let out = deform_mesh(&model(seed), &mesh, t, steps, &n).unwrap();
        prop_assert_eq!(out.faces(), mesh.faces());
        prop_assert_eq!(out.vertices().len(), mesh.vertices().len());
    }

    #[test]
    fn radial_field_matches_closed_form(a in -0.3f64..0.3, r0 in 0.1f64..0.8) {
        // v = a x has flow x e^{a t}
        let f = PointwiseField(move |x: [f64; 3], _| x.map(|c| a * c));
        let n = DomainNormalizer::new([-1.0; 3], [1.0; 3]);
        let mesh = TriangleMesh::icosphere(2, r0, [0.0; 3]);
        let out = deform_mesh::<f64, _>(&f, &mesh, 1.0, 128, &n).unwrap();
        let expect = r0 * a.exp();
        for v in out.vertices() {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            prop_assert!((r - expect).abs() <= 1e-3);
        }
    }

    #[test]
    fn zero_lambda_objective_is_the_data_term(seed in 0u64..20, pseed in 0u64..100) {
        let s = make_sphere_series(&SphereSeriesConfig::for_pattern(GrowthKind::Periodic, 8, 5)).unwrap();
        let pts = sample_points(&s.volume, 6, Sampling::Uniform, pseed).unwrap();
        let cfg = ObjectiveConfig { lambda: 0.0, use_cycle: true, steps_per_frame: 1, chunk_size: 250, workers: 1 };
        let v = objective_value(&model(seed), &s.volume, &pts, &cfg).unwrap();
        prop_assert_eq!(v.total, v.data);
    }
}

#[test]
fn time_zero_deformation_is_the_input() {
    let mesh = TriangleMesh::icosphere(3, 7.5, [12.0, 11.0, 13.0]);
    let n = DomainNormalizer::new([0.0; 3], [24.0; 3]);
    assert_eq!(deform_mesh(&model(1), &mesh, 0.0, 8, &n).unwrap(), mesh);
}
