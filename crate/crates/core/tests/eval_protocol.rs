use nalgebra::{Matrix3, Rotation3, Vector3};
use occface::eval::*;
use occface::head::{synthesize_assets, HeadConfig};
use occface::head::{Mesh, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ]
        })
        .collect()
}

fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle).matrix()
}

fn transform(points: &[Vec3], s: f64, r: &Matrix3<f64>, t: Vector3<f64>) -> Vec<Vec3> {
    points
        .iter()
        .map(|&p| {
            let q = r * Vector3::from(p) * s + t;
            [q.x, q.y, q.z]
        })
        .collect()
}

#[test]
fn recovers_known_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = cloud(&mut rng, 40);
    let r = rotation([0.3, -1.0, 0.5], 2.1);
    let t = Vector3::new(0.4, -0.2, 1.5);
    let dst = transform(&src, 2.0, &r, t);
    let tr = procrustes_align(&src, &dst, AlignmentMode::NonMetrical).unwrap();
    assert!((tr.scale - 2.0).abs() < 1e-9, "scale {}", tr.scale);
    assert!((tr.rotation - r).abs().max() < 1e-9);
    assert!((tr.translation - t).abs().max() < 1e-9);
    assert!((tr.rotation.determinant() - 1.0).abs() < 1e-12);
}

#[test]
fn metrical_mode_keeps_scale_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = cloud(&mut rng, 30);
    let r = rotation([1.0, 1.0, 0.0], 0.7);
    let dst = transform(&src, 1.5, &r, Vector3::new(0.1, 0.0, 0.0));
    let tr = procrustes_align(&src, &dst, AlignmentMode::Metrical).unwrap();
    assert_eq!(tr.scale, 1.0);
    assert!((tr.rotation - r).abs().max() < 1e-9);
    let visible = vec![true; src.len()];
    let metrical = masked_vertex_rmse(&src, &dst, &visible, &[], AlignmentMode::Metrical).unwrap();
    let similarity =
        masked_vertex_rmse(&src, &dst, &visible, &[], AlignmentMode::NonMetrical).unwrap();
    assert!(
        metrical > 1.0 && similarity < 1e-9,
        "{metrical} {similarity}"
    );
}

#[test]
fn mirrored_target_still_gets_a_proper_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = cloud(&mut rng, 20);
    let dst: Vec<Vec3> = src.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let tr = procrustes_align(&src, &dst, AlignmentMode::NonMetrical).unwrap();
    assert!((tr.rotation.determinant() - 1.0).abs() < 1e-12);
    assert!(tr.scale > 0.0);
}

fn sq_residual(tr: &Transform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(&s, d)| {
            let q = tr.apply(s);
            (0..3).map(|k| (q[k] - d[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

#[test]
fn rmse_matches_loop_oracle_and_alignment_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = cloud(&mut rng, 60);
    let r = rotation([0.2, 0.9, -0.4], 0.9);
    let noisy: Vec<Vec3> = gt
        .iter()
        .map(|p| p.map(|v| v + rng.random_range(-0.003..0.003)))
        .collect();
    let pred = transform(&noisy, 1.2, &r, Vector3::new(0.3, 0.1, -0.2));
    let visible: Vec<bool> = (0..60).map(|i| i % 3 != 0).collect();
    let landmarks: Vec<usize> = (0..60).step_by(2).collect();
    for mode in [AlignmentMode::NonMetrical, AlignmentMode::Metrical] {
        let got = masked_vertex_rmse(&pred, &gt, &visible, &landmarks, mode).unwrap();

        let idx: Vec<usize> = landmarks.iter().copied().filter(|&i| visible[i]).collect();
        let src: Vec<Vec3> = idx.iter().map(|&i| pred[i]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&i| gt[i]).collect();
        let tr = procrustes_align(&src, &dst, mode).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..60 {
            if visible[i] {
                let q = tr.apply(pred[i]);
                let d2: f64 = (0..3).map(|k| (q[k] - gt[i][k]).powi(2)).sum();
                total += d2 * 1e6;
                count += 1;
            }
        }
        assert!((got - (total / count as f64).sqrt()).abs() < 1e-12);

        // no nearby transform fits the landmarks better
        let best = sq_residual(&tr, &src, &dst);
        for _ in 0..200 {
            let dr = rotation([rng.random(), rng.random(), rng.random()], 1e-3);
            let mut alt = tr;
            alt.rotation = dr * tr.rotation;
            alt.translation += Vector3::new(rng.random(), rng.random(), rng.random()) * 1e-4;
            if mode == AlignmentMode::NonMetrical {
                alt.scale *= 1.0 + rng.random_range(-1e-3..1e-3);
            }
            assert!(sq_residual(&alt, &src, &dst) >= best);
        }
    }
}

#[test]
fn exact_prediction_scores_zero_for_every_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = cloud(&mut rng, 30);
    let mut visible = vec![true; 30];
    while visible.iter().filter(|&&v| v).count() >= 3 {
        for mode in [AlignmentMode::NonMetrical, AlignmentMode::Metrical] {
            assert!(masked_vertex_rmse(&gt, &gt, &visible, &[], mode).unwrap() < 1e-9);
        }
        let on: Vec<usize> = (0..30).filter(|&i| visible[i]).collect();
        visible[on[rng.random_range(0..on.len())]] = false;
    }
    assert!(masked_vertex_rmse(&gt, &gt, &[false; 30], &[], AlignmentMode::Metrical).is_err());
}

#[test]
fn uniform_offset_is_removed() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = cloud(&mut rng, 25);
    let shifted: Vec<Vec3> = gt.iter().map(|p| [p[0], p[1], p[2] + 0.001]).collect();
    let e = masked_vertex_rmse(&shifted, &gt, &[true; 25], &[], AlignmentMode::Metrical).unwrap();
    assert!(e < 1e-9, "{e}");
}

#[test]
fn statistics_two_pair_example() {
    let s = Summary::from_errors(&[1.0, 3.0]).unwrap();
    assert_eq!((s.median, s.mean, s.std), (2.0, 2.0, 1.0));
}

fn pair(id: &str, pred: Vec<Vec3>, gt: Vec<Vec3>, occluded: bool) -> EvalPair {
    let n = gt.len();
    EvalPair {
        id: id.into(),
        predicted: Mesh { vertices: pred },
        ground_truth: gt,
        visible: vec![true; n],
        landmarks: vec![],
        occluded,
    }
}

#[test]
fn self_evaluation_is_all_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<EvalPair> = (0..5)
        .map(|i| {
            let gt = cloud(&mut rng, 20);
            pair(&format!("p{i}"), gt.clone(), gt, i % 2 == 0)
        })
        .collect();
    for report in [
        now_style_stats(&pairs, AlignmentMode::NonMetrical).unwrap(),
        co545_style_stats(&pairs, AlignmentMode::Metrical).unwrap(),
    ] {
        assert!(report.pairs.iter().all(|p| p.error_mm == 0.0));
        assert_eq!(
            (
                report.summary.median,
                report.summary.mean,
                report.summary.std
            ),
            (0.0, 0.0, 0.0)
        );
    }
}

#[test]
fn report_layout_and_recomputed_summary() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<EvalPair> = (0..7)
        .map(|i| {
            let gt = cloud(&mut rng, 20);
            let pred = gt
                .iter()
                .map(|p| p.map(|v| v + rng.random_range(-0.002..0.002)))
                .collect();
            pair(&format!("p{i}"), pred, gt, i < 3)
        })
        .collect();
    let report = now_style_stats(&pairs, AlignmentMode::NonMetrical).unwrap();
    let errs: Vec<f64> = report.pairs.iter().map(|p| p.error_mm).collect();
    let again = Summary::from_errors(&errs).unwrap();
    assert!((again.median - report.summary.median).abs() < 1e-12);
    assert!((again.mean - report.summary.mean).abs() < 1e-12);
    assert!((again.std - report.summary.std).abs() < 1e-12);

    let csv = report.to_csv();
    assert!(csv.starts_with("# point-to-point"));
    assert_eq!(csv.lines().nth(1), Some("id,occluded,error_mm"));
    assert_eq!(csv.lines().count(), 2 + 7);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    for key in ["median", "mean", "std"] {
        assert!(json["summary"][key].is_f64());
    }
    assert_eq!(json["alignment"], "non_metrical");
    assert!(json["distances"]
        .as_str()
        .unwrap()
        .contains("point-to-point"));

    let split = report.split().unwrap();
    assert_eq!(split.len(), 2);
    assert_eq!(
        (split[0].subset.as_str(), split[0].pairs.len()),
        ("unoccluded", 4)
    );
    assert_eq!(
        (split[1].subset.as_str(), split[1].pairs.len()),
        ("occluded", 3)
    );
}

/// UV sphere of radius `r` centred at the origin, outward faces.
fn sphere(r: f64, rings: usize, segments: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut v = vec![[0.0, r, 0.0]];
    for i in 1..rings {
        let phi = std::f64::consts::PI * i as f64 / rings as f64;
        for j in 0..segments {
            let th = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            v.push([
                r * phi.sin() * th.cos(),
                r * phi.cos(),
                r * phi.sin() * th.sin(),
            ]);
        }
    }
    v.push([0.0, -r, 0.0]);
    let bottom = (v.len() - 1) as u32;
    let idx = |i: usize, j: usize| (1 + (i - 1) * segments + j % segments) as u32;
    let mut f = Vec::new();
    for j in 0..segments {
        f.push([0, idx(1, j + 1), idx(1, j)]);
        f.push([bottom, idx(rings - 1, j), idx(rings - 1, j + 1)]);
    }
    for i in 1..rings - 1 {
        for j in 0..segments {
            let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1));
            f.push([a, b, d]);
            f.push([a, d, c]);
        }
    }
    (v, f)
}

#[test]
fn sphere_visibility_matches_hemisphere() {
    // odd segment count keeps every vertex off the silhouette plane
    let (v, f) = sphere(1.0, 16, 33);
    let normals = vertex_normals(&v, &f).unwrap();
    for (p, n) in v.iter().zip(&normals) {
        let dot: f64 = (0..3).map(|k| p[k] * n[k]).sum();
        assert!(dot > 0.95, "normals point outward");
    }
    for (view, axis, sign) in [([0.0, 0.0, -1.0], 2, 1.0), ([1.0, 0.0, 0.0], 0, -1.0)] {
        let cam = Camera { view };
        let vis = visible_vertices(&v, &f, None, &OcclusionMask::None, &cam).unwrap();
        for (i, p) in v.iter().enumerate() {
            if p[axis].abs() > 1e-9 {
                assert_eq!(vis[i], sign * p[axis] > 0.0, "vertex {i} at {p:?}");
            }
        }
    }
    let cam = Camera::default();
    let masked = visible_vertices(
        &v,
        &f,
        None,
        &OcclusionMask::Region {
            min: [-2.0, 0.0],
            max: [2.0, 2.0],
        },
        &cam,
    )
    .unwrap();
    for (i, p) in v.iter().enumerate() {
        if p[2] > 1e-9 {
            let [_, y] = cam.project(*p).unwrap();
            assert_eq!(masked[i], y < 0.0);
        }
    }
}

#[test]
fn protocol_construction_on_head_assets() {
    let assets = synthesize_assets(&HeadConfig {
        vertices: 400,
        shape_dim: 10,
        expr_dim: 5,
        ..HeadConfig::default()
    })
    .unwrap();
    let gt = Mesh {
        vertices: assets.template.clone(),
    };
    let cam = Camera::default();
    let items = build_masked_protocol(
        &assets,
        &[gt.clone(), gt.clone(), gt.clone()],
        &[
            OcclusionMask::None,
            OcclusionMask::Vertices {
                indices: assets.landmarks[..10].to_vec(),
            },
            OcclusionMask::Region {
                min: [-1.0, -1.0],
                max: [1.0, 1.0],
            },
        ],
        &cam,
    );
    assert!(items.is_err(), "full occlusion must fail");
    let items = build_masked_protocol(
        &assets,
        &[gt.clone(), gt.clone()],
        &[
            OcclusionMask::None,
            OcclusionMask::Vertices {
                indices: assets.landmarks[..10].to_vec(),
            },
        ],
        &cam,
    )
    .unwrap();
    let normals = vertex_normals(&gt.vertices, &assets.faces).unwrap();
    let facing: Vec<bool> = (0..gt.len())
        .map(|i| assets.frontal_mask[i] && normals[i][2] > 0.0)
        .collect();
    assert_eq!(items[0].visible, facing);
    assert!(!items[0].occluded && items[1].occluded);
    assert!(assets.landmarks[..10].iter().all(|&l| !items[1].visible[l]));
    let eval = items[1].pair(gt.clone(), &gt, &assets.landmarks);
    assert_eq!(eval.rmse(AlignmentMode::Metrical).unwrap(), 0.0);
}

fn arb_rigid() -> impl Strategy<Value = (Matrix3<f64>, Vector3<f64>)> {
    (
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        -3.0f64..3.0,
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
    )
        .prop_filter_map("axis must be nonzero", |((a, b, c), angle, (x, y, z))| {
            let axis = Vector3::new(a, b, c);
            (axis.norm() > 1e-3).then(|| (rotation([a, b, c], angle), Vector3::new(x, y, z)))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_is_rigid_invariant((r, t) in arb_rigid(), scale in 0.5f64..2.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = cloud(&mut rng, 30);
        let pred: Vec<Vec3> = gt.iter().map(|p| p.map(|v| v + rng.random_range(-0.002..0.002))).collect();
        let visible: Vec<bool> = (0..30).map(|i| i % 4 != 1).collect();
        let base_m = masked_vertex_rmse(&pred, &gt, &visible, &[], AlignmentMode::Metrical).unwrap();
        let moved = transform(&pred, 1.0, &r, t);
        let m = masked_vertex_rmse(&moved, &gt, &visible, &[], AlignmentMode::Metrical).unwrap();
        prop_assert!((m - base_m).abs() < 1e-9, "{} vs {}", m, base_m);
        let base_s = masked_vertex_rmse(&pred, &gt, &visible, &[], AlignmentMode::NonMetrical).unwrap();
        let scaled = transform(&pred, scale, &r, t);
        let s = masked_vertex_rmse(&scaled, &gt, &visible, &[], AlignmentMode::NonMetrical).unwrap();
        prop_assert!((s - base_s).abs() < 1e-9, "{} vs {}", s, base_s);
    }

    #[test]
    fn summary_is_permutation_invariant(
        errs in prop::collection::vec(0.0f64..10.0, 1..50),
        seed in 0u64..1000,
    ) {
        let mut shuffled = errs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(Summary::from_errors(&errs).unwrap(), Summary::from_errors(&shuffled).unwrap());
    }
}
