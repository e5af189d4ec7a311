use mtpose_core::rotgeom::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn angles(max_pitch: f64) -> impl Strategy<Value = EulerAngles> {
    (-179.999f64..180.0, -max_pitch..=max_pitch, -179.999f64..180.0).prop_map(|(y, p, r)| EulerAngles::new(y, p, r))
}

fn matrix() -> impl Strategy<Value = Matrix3> {
    prop::array::uniform3(prop::array::uniform3(-3.0f64..3.0)).prop_map(Matrix3)
}

/// Random matrix of the given rank as a sum of outer products.
fn ranked(rank: usize) -> impl Strategy<Value = Matrix3> {
    prop::collection::vec((prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-2.0f64..2.0)), rank).prop_map(|terms| {
        let mut m = [[0.0; 3]; 3];
        for (a, b) in terms {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += a[i] * b[j];
                }
            }
        }
        Matrix3(m)
    })
}

/// Eigenvalues of a symmetric 3×3 matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut j = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            j[p][p] = c;
            j[q][q] = c;
            j[p][q] = s;
            j[q][p] = -s;
            // a <- jᵀ a j
            let mut tmp = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    tmp[i][k] = (0..3).map(|l| a[i][l] * j[l][k]).sum();
                }
            }
            for i in 0..3 {
                for k in 0..3 {
                    a[i][k] = (0..3).map(|l| j[l][i] * tmp[l][k]).sum();
                }
            }
        }
    }
    let mut e = [a[0][0], a[1][1], a[2][2]];
    e.sort_by(|x, y| y.total_cmp(x));
    e
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3 {
    // Uniform unit quaternion.
    let q: [f64; 4] = loop {
        let v: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    Matrix3([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn euler_roundtrip(a in angles(89.0)) {
        let back = matrix_to_euler(&euler_to_matrix(a).unwrap());
        let err = angular_error(&back, &a.normalized());
        prop_assert!(err.iter().all(|e| *e < 1e-6), "{a:?} -> {back:?}");
    }

    #[test]
    fn columns_are_right_handed_orthonormal(a in angles(90.0)) {
        let p = pose_vectors_from_matrix(&euler_to_matrix(a).unwrap());
        prop_assert!(dot(&p.v1, &p.v2).abs() < 1e-12);
        prop_assert!(dot(&p.v1, &p.v3).abs() < 1e-12);
        prop_assert!(dot(&p.v2, &p.v3).abs() < 1e-12);
        prop_assert!((dot(&cross(&p.v1, &p.v2), &p.v3) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn svd_reconstructs_full_rank(m in matrix()) {
        let s = svd3(&m).unwrap();
        prop_assert!(s.reconstruct().distance(&m) < 1e-9);
        prop_assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2] && s.sigma[2] >= 0.0);
        prop_assert!(s.u.orthogonality_error() < 1e-9 && s.v.orthogonality_error() < 1e-9);
    }

    #[test]
    fn svd_reconstructs_low_rank(m in (1usize..=2).prop_flat_map(ranked)) {
        let s = svd3(&m).unwrap();
        prop_assert!(s.reconstruct().distance(&m) < 1e-9);
        prop_assert!(s.u.orthogonality_error() < 1e-9 && s.v.orthogonality_error() < 1e-9);
    }

    #[test]
    fn nearest_rotation_is_proper_and_idempotent(m in matrix()) {
        let Ok(r) = nearest_rotation(&m) else { return Ok(()) };
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        let again = nearest_rotation(r.matrix()).unwrap();
        prop_assert!(again.matrix().distance(r.matrix()) < 1e-12);
    }

    #[test]
    fn nearest_rotation_ignores_positive_scale(m in matrix(), c in 0.01f64..100.0) {
        let (Ok(a), Ok(b)) = (nearest_rotation(&m), nearest_rotation(&m.scale(c))) else { return Ok(()) };
        prop_assert!(a.matrix().distance(b.matrix()) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn singular_values_match_eigen_oracle(m in matrix()) {
        let s = svd3(&m).unwrap();
        let mtm = m.transpose() * m;
        let eig = symmetric_eigenvalues(mtm.0);
        for (sv, e) in s.sigma.iter().zip(eig) {
            prop_assert!((sv * sv - e.max(0.0)).abs() < 1e-8 * (1.0 + e.abs()), "{:?} vs {eig:?}", s.sigma);
        }
    }

    #[test]
    fn procrustes_beats_sampled_rotations(m in matrix(), seed in any::<u64>()) {
        let Ok(r) = nearest_rotation(&m) else { return Ok(()) };
        let best = m.distance(r.matrix());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let q = random_rotation(&mut rng);
            prop_assert!(best <= m.distance(&q) + 1e-12);
        }
    }
}
