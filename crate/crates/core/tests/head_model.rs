use nalgebra::{Matrix3, Vector3};
use occface::head::{
    read_obj_vertices, rodrigues, synthesize_assets, write_obj, CoeffKind, CoefficientVector,
    HeadConfig, Mesh, ModelAssets,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assets(pose_scale: f64) -> ModelAssets {
    synthesize_assets(&HeadConfig {
        vertices: 150,
        shape_dim: 20,
        expr_dim: 10,
        joints: 4,
        seed: 7,
        pose_corrective_scale: pose_scale,
    })
    .unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn shape(v: Vec<f64>) -> CoefficientVector {
    CoefficientVector::shape(v).unwrap()
}
fn expr(v: Vec<f64>) -> CoefficientVector {
    CoefficientVector::expression(v).unwrap()
}
fn pose(v: Vec<f64>) -> CoefficientVector {
    CoefficientVector::pose(v).unwrap()
}

fn max_abs_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn single_direction_offset_matches_explicit_column() {
    let a = assets(0.0);
    let k = 3;
    let mut beta = vec![0.0; a.shape_dim];
    beta[k] = 2.0;
    let out = a
        .blend_shapes(
            &shape(beta),
            &CoefficientVector::zeros(CoeffKind::Pose, a.pose_dim()),
            &CoefficientVector::zeros(CoeffKind::Expression, a.expr_dim),
        )
        .unwrap();
    for i in 0..a.vertex_count() {
        for c in 0..3 {
            let col = a.shape_basis[(i * 3 + c) * a.shape_dim + k];
            let want = a.template[i][c] + 2.0 * col;
            assert!((out.vertices[i][c] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn blendshapes_superpose() {
    let a = assets(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = CoefficientVector::zeros(CoeffKind::Pose, a.pose_dim());
    for _ in 0..10 {
        let (b1, b2) = (
            rand_vec(&mut rng, a.shape_dim, 2.0),
            rand_vec(&mut rng, a.shape_dim, 2.0),
        );
        let (e1, e2) = (
            rand_vec(&mut rng, a.expr_dim, 2.0),
            rand_vec(&mut rng, a.expr_dim, 2.0),
        );
        let sum = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + q).collect::<Vec<_>>();
        let m =
            |b: Vec<f64>, e: Vec<f64>| a.reconstruct(&shape(b), &theta, &expr(e)).unwrap().vertices;
        let both = m(sum(&b1, &b2), sum(&e1, &e2));
        let one = m(b1, e1);
        let two = m(b2, e2);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..a.vertex_count() {
            for c in 0..3 {
                let t = a.template[i][c];
                let lhs = both[i][c] - t;
                let rhs = (one[i][c] - t) + (two[i][c] - t);
                num = num.max((lhs - rhs).abs());
                den = den.max(rhs.abs());
            }
        }
        assert!(
            num <= 1e-8 * den,
            "superposition error {num} vs scale {den}"
        );
    }
}

#[test]
fn regressor_oracles() {
    let mut a = assets(0.0);
    let n = a.vertex_count();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let verts: Vec<[f64; 3]> = (0..n)
        .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let mesh = Mesh {
        vertices: verts.clone(),
    };

    a.joint_regressor = vec![0.0; a.joint_count() * n];
    for j in 0..a.joint_count() {
        a.joint_regressor[j * n + 5 * j] = 1.0;
    }
    let joints = a.regress_joints(&mesh).unwrap();
    for j in 0..a.joint_count() {
        assert_eq!(joints[j], verts[5 * j]);
    }

    a.joint_regressor
        .iter_mut()
        .for_each(|w| *w = 1.0 / n as f64);
    let centroid = [0, 1, 2].map(|c| verts.iter().map(|v| v[c]).sum::<f64>() / n as f64);
    for j in a.regress_joints(&mesh).unwrap() {
        for c in 0..3 {
            assert!((j[c] - centroid[c]).abs() < 1e-14);
        }
    }

    a.joint_regressor = (0..a.joint_count() * n)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let joints = a.regress_joints(&mesh).unwrap();
    for j in 0..a.joint_count() {
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a.joint_regressor[j * n + i] * verts[i][c];
            }
            assert!((joints[j][c] - acc).abs() < 1e-12);
        }
    }
    assert!(a
        .regress_joints(&Mesh {
            vertices: verts[1..].to_vec()
        })
        .is_err());
}

#[test]
fn zero_pose_lbs_is_identity() {
    let a = assets(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rest = a
        .shaped(
            &shape(rand_vec(&mut rng, a.shape_dim, 1.0)),
            &expr(rand_vec(&mut rng, a.expr_dim, 1.0)),
        )
        .unwrap();
    let joints = a.regress_joints(&rest).unwrap();
    let posed = a
        .lbs(
            &rest,
            &joints,
            &CoefficientVector::zeros(CoeffKind::Pose, a.pose_dim()),
        )
        .unwrap();
    assert!(max_abs_diff(&posed.vertices, &rest.vertices) < 1e-9);
    // non-zero but vanishingly small pose goes through the full transform path
    let mut tiny = vec![0.0; a.pose_dim()];
    tiny[4] = 1e-300;
    let posed = a.lbs(&rest, &joints, &pose(tiny)).unwrap();
    assert!(max_abs_diff(&posed.vertices, &rest.vertices) < 1e-9);
}

#[test]
fn root_rotation_is_rigid_about_root() {
    let a = assets(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let beta = shape(rand_vec(&mut rng, a.shape_dim, 1.0));
    let psi = expr(rand_vec(&mut rng, a.expr_dim, 1.0));
    let rest = a.shaped(&beta, &psi).unwrap();
    let joints = a.regress_joints(&rest).unwrap();
    let mut theta = vec![0.0; a.pose_dim()];
    theta[..3].copy_from_slice(&[0.3, -0.7, 0.2]);
    let r = rodrigues([0.3, -0.7, 0.2]).unwrap();
    let posed = a.reconstruct(&beta, &pose(theta), &psi).unwrap();
    let root = Vector3::from(joints[0]);
    for (p, v) in posed.vertices.iter().zip(&rest.vertices) {
        let want = r * (Vector3::from(*v) - root) + root;
        assert!((Vector3::from(*p) - want).norm() < 1e-12);
    }
    let mut worst = 0.0f64;
    for i in 0..a.vertex_count() {
        for j in (i + 1)..a.vertex_count() {
            let d0 = (Vector3::from(rest.vertices[i]) - Vector3::from(rest.vertices[j])).norm();
            let d1 = (Vector3::from(posed.vertices[i]) - Vector3::from(posed.vertices[j])).norm();
            worst = worst.max((d0 - d1).abs());
        }
    }
    assert!(worst < 1e-9, "distance drift {worst}");
}

#[test]
fn single_joint_rotation_matches_per_vertex_oracle() {
    let mut a = assets(0.0);
    let k = a.joint_count();
    let jaw = 2;
    // vertices in the lower half follow the jaw alone, the rest the root alone
    let owner: Vec<usize> = a
        .template
        .iter()
        .map(|v| if v[1] < 0.0 { jaw } else { 0 })
        .collect();
    a.skin_weights = owner
        .iter()
        .flat_map(|&o| (0..k).map(move |j| if j == o { 1.0 } else { 0.0 }))
        .collect();
    let rest = Mesh {
        vertices: a.template.clone(),
    };
    let joints = a.regress_joints(&rest).unwrap();
    let angle = 30f64.to_radians();
    let mut theta = vec![0.0; a.pose_dim()];
    theta[3 * jaw] = angle;
    let posed = a.lbs(&rest, &joints, &pose(theta)).unwrap();

    let (s, c) = angle.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
    let pivot = Vector3::from(joints[jaw]);
    for (i, v) in rest.vertices.iter().enumerate() {
        let v = Vector3::from(*v);
        let want = if owner[i] == jaw {
            rx * (v - pivot) + pivot
        } else {
            v
        };
        assert!(
            (Vector3::from(posed.vertices[i]) - want).norm() < 1e-12,
            "vertex {i}"
        );
    }
}

#[test]
fn chained_rotations_compose_along_parents() {
    let mut a = assets(0.0);
    let k = a.joint_count();
    let jaw = 2;
    assert_eq!(a.parents[jaw], Some(1));
    a.skin_weights = (0..a.vertex_count())
        .flat_map(|_| (0..k).map(|j| if j == jaw { 1.0 } else { 0.0 }))
        .collect();
    let rest = Mesh {
        vertices: a.template.clone(),
    };
    let joints = a.regress_joints(&rest).unwrap();
    let mut theta = vec![0.0; a.pose_dim()];
    theta[3..6].copy_from_slice(&[0.0, 0.4, 0.0]);
    theta[6..9].copy_from_slice(&[0.2, 0.0, 0.1]);
    let posed = a.lbs(&rest, &joints, &pose(theta)).unwrap();
    let rn = rodrigues([0.0, 0.4, 0.0]).unwrap();
    let rj = rodrigues([0.2, 0.0, 0.1]).unwrap();
    let (jn, jj) = (Vector3::from(joints[1]), Vector3::from(joints[jaw]));
    for (p, v) in posed.vertices.iter().zip(&rest.vertices) {
        let local = rj * (Vector3::from(*v) - jj) + jj;
        let want = rn * (local - jn) + jn;
        assert!((Vector3::from(*p) - want).norm() < 1e-12);
    }
}

#[test]
fn reconstruct_composes_the_three_stages() {
    let a = assets(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let beta = shape(rand_vec(&mut rng, a.shape_dim, 0.5));
    let psi = expr(rand_vec(&mut rng, a.expr_dim, 0.5));
    let theta = pose(rand_vec(&mut rng, a.pose_dim(), 0.2));
    let full = a.reconstruct(&beta, &theta, &psi).unwrap();
    let joints = a.regress_joints(&a.shaped(&beta, &psi).unwrap()).unwrap();
    let tp = a.blend_shapes(&beta, &theta, &psi).unwrap();
    let manual = a.lbs(&tp, &joints, &theta).unwrap();
    assert_eq!(full, manual);
    // pose correctives are live when configured
    assert_ne!(tp, a.shaped(&beta, &psi).unwrap());

    let zero_pose = CoefficientVector::zeros(CoeffKind::Pose, a.pose_dim());
    assert_eq!(
        a.reconstruct(&beta, &zero_pose, &psi).unwrap(),
        a.blend_shapes(&beta, &zero_pose, &psi).unwrap()
    );
}

#[test]
fn frontal_extraction_oracles() {
    let mut a = assets(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mesh = Mesh {
        vertices: (0..a.vertex_count())
            .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    };
    let f = a.extract_frontal(&mesh).unwrap();
    assert_eq!(f.len(), a.frontal_count());
    let oracle: Vec<_> = (0..a.vertex_count())
        .filter(|&i| a.frontal_mask[i])
        .map(|i| mesh.vertices[i])
        .collect();
    assert_eq!(f, oracle);

    a.frontal_mask.iter_mut().for_each(|m| *m = true);
    assert_eq!(a.extract_frontal(&mesh).unwrap(), mesh.vertices);

    a.frontal_mask
        .iter_mut()
        .enumerate()
        .for_each(|(i, m)| *m = i == 17);
    assert_eq!(a.extract_frontal(&mesh).unwrap(), vec![mesh.vertices[17]]);

    a.frontal_mask.iter_mut().for_each(|m| *m = false);
    assert!(a.extract_frontal(&mesh).is_err());
}

#[test]
fn synthesis_is_deterministic_with_orthogonal_bases() {
    let cfg = HeadConfig {
        vertices: 300,
        shape_dim: 40,
        expr_dim: 12,
        joints: 6,
        seed: 11,
        pose_corrective_scale: 0.0,
    };
    let a = synthesize_assets(&cfg).unwrap();
    assert_eq!(a, synthesize_assets(&cfg).unwrap());
    assert_ne!(
        a,
        synthesize_assets(&HeadConfig {
            seed: 12,
            ..cfg.clone()
        })
        .unwrap()
    );
    let col = |basis: &[f64], dim: usize, k: usize| -> Vec<f64> {
        (0..3 * a.vertex_count())
            .map(|r| basis[r * dim + k])
            .collect()
    };
    let mut cols: Vec<Vec<f64>> = (0..a.shape_dim)
        .map(|k| col(&a.shape_basis, a.shape_dim, k))
        .collect();
    cols.extend((0..a.expr_dim).map(|k| col(&a.expr_basis, a.expr_dim, k)));
    for i in 0..cols.len() {
        for j in (i + 1)..cols.len() {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
            assert!(dot.abs() < 1e-6, "columns {i},{j} dot {dot}");
        }
    }
    assert_eq!(a.joint_count(), 7);
    assert!(a.landmarks.len() <= 68 && !a.landmarks.is_empty());
    assert!(a.frontal_count() > 0 && a.frontal_count() < a.vertex_count());
    // every frontal vertex faces the camera side of the head
    for i in a.frontal_indices() {
        assert!(a.template[i][2] > 0.0);
    }
}

#[test]
fn assets_and_obj_round_trip_through_files() {
    let a = assets(0.01);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.asset");
    a.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"OFERASST");
    assert_eq!(ModelAssets::load(&path).unwrap(), a);

    let obj = dir.path().join("head.obj");
    write_obj(&obj, &a.template, &a.faces).unwrap();
    let back = read_obj_vertices(&obj).unwrap();
    for (p, q) in back.iter().zip(&a.template) {
        for c in 0..3 {
            // nine significant digits: half a unit in the ninth place
            assert!((p[c] - q[c]).abs() <= 5.000001e-9 * q[c].abs() + 1e-300);
        }
    }
}

/// Real model files are license-gated; point `OCCFACE_FLAME_ASSETS` at an
/// asset container converted from them to run this.
#[test]
#[ignore]
fn converted_flame_assets_have_5023_vertices() {
    let path = std::env::var("OCCFACE_FLAME_ASSETS").expect("OCCFACE_FLAME_ASSETS not set");
    let a = ModelAssets::load(std::path::Path::new(&path)).unwrap();
    assert_eq!(a.vertex_count(), 5023);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_coefficients_give_template(seed in 0u64..1000, n in 12usize..200) {
        let a = synthesize_assets(&HeadConfig {
            vertices: n, shape_dim: 6, expr_dim: 3, joints: 2, seed, pose_corrective_scale: 0.1,
        }).unwrap();
        let out = a.reconstruct(
            &CoefficientVector::zeros(CoeffKind::Shape, 6),
            &CoefficientVector::zeros(CoeffKind::Pose, a.pose_dim()),
            &CoefficientVector::zeros(CoeffKind::Expression, 3),
        ).unwrap();
        prop_assert_eq!(out.vertices, a.template.clone());
    }

    #[test]
    fn frontal_row_count_is_mask_popcount(seed in 0u64..1000, s in prop::collection::vec(-3.0f64..3.0, 20)) {
        let a = assets(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = pose(rand_vec(&mut rng, a.pose_dim(), 0.5));
        let mesh = a.reconstruct(&shape(s), &theta, &expr(rand_vec(&mut rng, a.expr_dim, 2.0))).unwrap();
        prop_assert_eq!(a.extract_frontal(&mesh).unwrap().len(), a.frontal_count());
    }
}
