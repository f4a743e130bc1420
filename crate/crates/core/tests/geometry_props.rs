//! Mesh volume, surface distance and PSNR properties.

use perimotion::mesh::{mesh_volume, TriangleMesh};
use perimotion::metrics::{hausdorff, hausdorff_brute_force, psnr};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Jittered icosphere; the topology stays closed for any jitter.
fn mesh(seed: u64, level: u32, max_radius: f64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = [0; 3].map(|_: u8| rng.gen_range(-2.0..2.0));
    let r = rng.gen_range(0.5..max_radius);
    let base = TriangleMesh::icosphere(level, r, center);
    let jitter = 0.1 * r;
    let moved = base
        .vertices()
        .iter()
        .map(|v| v.map(|c| c + rng.gen_range(-jitter..jitter)))
        .collect();
    base.with_vertices(moved).unwrap()
}

fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    [
        (1.0 - 2.0 * (y * y + z * z)) * v[0] + 2.0 * (x * y - w * z) * v[1] + 2.0 * (x * z + w * y) * v[2],
        2.0 * (x * y + w * z) * v[0] + (1.0 - 2.0 * (x * x + z * z)) * v[1] + 2.0 * (y * z - w * x) * v[2],
        2.0 * (x * z - w * y) * v[0] + 2.0 * (y * z + w * x) * v[1] + (1.0 - 2.0 * (x * x + y * y)) * v[2],
    ]
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_is_translation_invariant(seed in any::<u64>(), t in [-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0]) {
        let m = mesh(seed, 2, 5.0);
        let moved = m.map_vertices(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]]);
        prop_assert!(close(mesh_volume(&m).unwrap(), mesh_volume(&moved).unwrap(), 1e-9));
    }

    #[test]
    fn volume_scales_cubically(seed in any::<u64>(), s in 0.1f64..10.0) {
        let m = mesh(seed, 2, 5.0);
        let scaled = m.map_vertices(|v| v.map(|c| c * s));
        prop_assert!(close(mesh_volume(&scaled).unwrap(), s * s * s * mesh_volume(&m).unwrap(), 1e-9));
    }

    #[test]
    fn flipping_negates_volume(seed in any::<u64>()) {
        let m = mesh(seed, 1, 5.0);
        prop_assert_eq!(mesh_volume(&m.flipped()).unwrap(), -mesh_volume(&m).unwrap());
    }

    #[test]
    fn obj_round_trip_within_tolerance(seed in any::<u64>()) {
        let m = mesh(seed, 2, 50.0);
        let back = TriangleMesh::from_obj_str(&m.to_obj_string()).unwrap();
        prop_assert_eq!(back.faces(), m.faces());
        for (a, b) in m.vertices().iter().zip(back.vertices()) {
            prop_assert!((0..3).all(|d| (a[d] - b[d]).abs() <= 1e-6));
        }
    }

    #[test]
    fn hausdorff_is_symmetric(a in any::<u64>(), b in any::<u64>()) {
        let (ma, mb) = (mesh(a, 1, 3.0), mesh(b, 2, 3.0));
        prop_assert_eq!(hausdorff(&ma, &mb).unwrap(), hausdorff(&mb, &ma).unwrap());
    }

    #[test]
    fn hausdorff_triangle_inequality(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let (ma, mb, mc) = (mesh(a, 2, 3.0), mesh(b, 2, 3.0), mesh(c, 2, 3.0));
        let h = |x: &TriangleMesh, y: &TriangleMesh| hausdorff(x, y).unwrap();
        prop_assert!(h(&ma, &mc) <= h(&ma, &mb) + h(&mb, &mc) + 1e-9);
    }

    #[test]
    fn hausdorff_is_rigid_invariant(
        a in any::<u64>(),
        b in any::<u64>(),
        q in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
        t in [-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0],
    ) {
        prop_assume!(q.iter().map(|c| c * c).sum::<f64>() > 0.01);
        let (ma, mb) = (mesh(a, 1, 3.0), mesh(b, 2, 3.0));
        let rigid = |v: [f64; 3]| {
            let r = rotate(q, v);
            [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
        };
        let before = hausdorff(&ma, &mb).unwrap();
        let after = hausdorff(&ma.map_vertices(rigid), &mb.map_vertices(rigid)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9);
    }

    #[test]
    fn indexed_hausdorff_equals_brute_force(a in any::<u64>(), b in any::<u64>(), la in 0u32..3, lb in 0u32..3) {
        // level 2 has 162 vertices, well under 500
        let (ma, mb) = (mesh(a, la, 3.0), mesh(b, lb, 3.0));
        let fast = hausdorff(&ma, &mb).unwrap();
        let brute = hausdorff_brute_force(&ma, &mb).unwrap();
        prop_assert!((fast - brute).abs() <= 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<f32> = (0..512).map(|_| rng.gen_range(0.0..1.0)).collect();
        let noise: Vec<f32> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (1..=10)
            .map(|k| {
                let amp = 0.01 * k as f32;
                let noisy: Vec<f32> = reference.iter().zip(&noise).map(|(r, n)| r + amp * n).collect();
                psnr(&noisy, &reference).unwrap()
            })
            .collect();
        prop_assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }
}

#[test]
fn reference_volumes() {
    assert_eq!(mesh_volume(&TriangleMesh::unit_cube()).unwrap(), 1.0);
    assert_eq!(mesh_volume(&TriangleMesh::unit_cube().flipped()).unwrap(), -1.0);
    let v = mesh_volume(&TriangleMesh::icosphere(4, 10.0, [0.0; 3])).unwrap();
    assert!((v - 4188.790204786391).abs() / 4188.790204786391 < 0.02);
}
