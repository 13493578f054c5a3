use nalgebra::{DMatrix, DVector};
use occface::data::{
    generate_dataset, make_gt_mesh, neutral_frontal, Region, Split, SynthConfig, SynthDataset,
};
use occface::head::{synthesize_assets, CoeffKind, CoefficientVector, HeadConfig};
use proptest::prelude::*;

fn cfg() -> SynthConfig {
    SynthConfig {
        identities: 10,
        expressions_per_identity: 3,
        shape_dim: 30,
        expr_dim: 8,
        ca_dim: 64,
        cf_dim: 32,
        val_identities: 2,
        ..SynthConfig::default()
    }
}

#[test]
fn clean_when_rate_and_noise_are_zero() {
    let ds = generate_dataset(&SynthConfig {
        occlusion_rate: 0.0,
        noise_sigma: 0.0,
        ..cfg()
    })
    .unwrap();
    for s in &ds.samples {
        assert_eq!(s.ca, s.clean_ca);
        assert_eq!(s.cf, s.clean_cf);
        assert_eq!(s.occlusion.region, Region::None);
    }
}

#[test]
fn generation_is_a_pure_function_of_config() {
    let a = generate_dataset(&cfg()).unwrap();
    assert_eq!(a, generate_dataset(&cfg()).unwrap());
    let b = generate_dataset(&SynthConfig { seed: 1, ..cfg() }).unwrap();
    assert_ne!(a.samples[0].beta, b.samples[0].beta);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    a.save(&p1).unwrap();
    generate_dataset(&cfg()).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(SynthDataset::load(&p1).unwrap(), a);
}

#[test]
fn corruption_touches_only_the_masked_block() {
    let c = SynthConfig {
        noise_sigma: 0.0,
        occluded_fraction: 1.0,
        occlusion_rate: 0.25,
        ..cfg()
    };
    let ds = generate_dataset(&c).unwrap();
    for s in &ds.samples {
        let block = s.occlusion.block(c.ca_dim);
        assert_eq!(block.len(), 16);
        for i in 0..c.ca_dim {
            if block.contains(&i) {
                assert_eq!(s.ca[i], 0.0);
            } else {
                assert_eq!(s.ca[i], s.clean_ca[i]);
            }
        }
    }
}

#[test]
fn identities_share_shape_and_split_by_identity() {
    let ds = generate_dataset(&cfg()).unwrap();
    for s in &ds.samples {
        assert_eq!(s.beta, ds.samples[s.identity * 3].beta);
        assert_eq!(s.split == Split::Val, s.identity >= 8);
    }
    assert_eq!(ds.split(Split::Val).count(), 6);
    let m = ds.manifest("data.bin");
    assert_eq!(m["splits"]["train"]["samples"], 24);
}

/// With `c = (Wβ + b)/s`, the unknowns `(β, s)` solve `[W | −c]·(β, s) = −b`.
#[test]
fn shape_is_recoverable_from_clean_embedding() {
    let c = SynthConfig {
        shape_dim: 300,
        ca_dim: 512,
        identities: 3,
        expressions_per_identity: 1,
        val_identities: 0,
        ..cfg()
    };
    let ds = generate_dataset(&c).unwrap();
    let enc = &ds.shape_encoder;
    for s in &ds.samples {
        let a = DMatrix::from_fn(c.ca_dim, c.shape_dim + 1, |r, k| {
            if k < c.shape_dim {
                enc.weight[r * c.shape_dim + k]
            } else {
                -s.clean_ca[r]
            }
        });
        let rhs = -DVector::from_column_slice(&enc.bias);
        let x = a.svd(true, true).solve(&rhs, 1e-14).unwrap();
        let beta = DVector::from_column_slice(&s.beta);
        let err = (x.rows(0, c.shape_dim) - &beta).norm() / beta.norm();
        assert!(err < 1e-6, "relative recovery error {err}");
    }
}

fn probe_r2(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<f64>],
) -> f64 {
    let d = train_x[0].len() + 1;
    let design = |xs: &[Vec<f64>]| {
        DMatrix::from_fn(xs.len(), d, |r, k| if k + 1 == d { 1.0 } else { xs[r][k] })
    };
    let targets = |ys: &[Vec<f64>]| DMatrix::from_fn(ys.len(), ys[0].len(), |r, k| ys[r][k]);
    let (x, y) = (design(train_x), targets(train_y));
    let ridge = DMatrix::<f64>::identity(d, d) * 1e-8;
    let w = (x.transpose() * &x + ridge)
        .lu()
        .solve(&(x.transpose() * y))
        .unwrap();
    let pred = design(test_x) * w;
    let truth = targets(test_y);
    let mean = truth.row_mean();
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for r in 0..truth.nrows() {
        for k in 0..truth.ncols() {
            ss_res += (truth[(r, k)] - pred[(r, k)]).powi(2);
            ss_tot += (truth[(r, k)] - mean[k]).powi(2);
        }
    }
    1.0 - ss_res / ss_tot
}

#[test]
fn linear_probe_is_near_perfect_on_clean_and_degrades_under_occlusion() {
    let c = SynthConfig {
        identities: 900,
        expressions_per_identity: 1,
        shape_dim: 40,
        ca_dim: 128,
        val_identities: 0,
        occluded_fraction: 1.0,
        occlusion_rate: 0.75,
        noise_sigma: 0.01,
        ..cfg()
    };
    let ds = generate_dataset(&c).unwrap();
    let (train, test) = ds.samples.split_at(600);
    let get = |v: &[occface::data::SynthSample],
               f: fn(&occface::data::SynthSample) -> &Vec<f64>| {
        v.iter().map(|s| f(s).clone()).collect::<Vec<_>>()
    };
    let clean = probe_r2(
        &get(train, |s| &s.clean_ca),
        &get(train, |s| &s.beta),
        &get(test, |s| &s.clean_ca),
        &get(test, |s| &s.beta),
    );
    let corrupted = probe_r2(
        &get(train, |s| &s.ca),
        &get(train, |s| &s.beta),
        &get(test, |s| &s.ca),
        &get(test, |s| &s.beta),
    );
    assert!(clean > 0.99, "clean probe R² {clean}");
    assert!(
        corrupted < clean - 0.2,
        "corrupted probe R² {corrupted} vs clean {clean}"
    );
}

#[test]
fn ground_truth_meshes_follow_the_head_model() {
    let assets = synthesize_assets(&HeadConfig {
        vertices: 200,
        shape_dim: 30,
        expr_dim: 8,
        ..HeadConfig::default()
    })
    .unwrap();
    let ds = generate_dataset(&cfg()).unwrap();
    let s = &ds.samples[4];
    let (mesh, frontal) = make_gt_mesh(&assets, &s.beta, &s.psi).unwrap();
    let manual = assets
        .reconstruct(
            &CoefficientVector::shape(s.beta.clone()).unwrap(),
            &CoefficientVector::zeros(CoeffKind::Pose, assets.pose_dim()),
            &CoefficientVector::expression(s.psi.clone()).unwrap(),
        )
        .unwrap();
    assert_eq!(mesh, manual);
    assert_eq!(frontal, assets.extract_frontal(&manual).unwrap());

    let zeros_b = vec![0.0; 30];
    let (_, f0) = make_gt_mesh(&assets, &zeros_b, &[0.0; 8]).unwrap();
    let template_front: Vec<_> = assets
        .frontal_indices()
        .iter()
        .map(|&i| assets.template[i])
        .collect();
    assert_eq!(f0, template_front);

    let same_identity: Vec<_> = ds
        .samples
        .iter()
        .filter(|x| x.identity == s.identity)
        .collect();
    let reference = neutral_frontal(&assets, &same_identity[0].beta).unwrap();
    for x in same_identity {
        assert_eq!(neutral_frontal(&assets, &x.beta).unwrap(), reference);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn occluded_blocks_stay_within_rate(seed in 0u64..10_000, rate in 0.0f64..1.0, dim in 1usize..80) {
        let c = SynthConfig { seed, occlusion_rate: rate, occluded_fraction: 1.0, ca_dim: dim, cf_dim: dim + 3, ..cfg() };
        let ds = generate_dataset(&c).unwrap();
        for s in &ds.samples {
            prop_assert!(s.occlusion.block(c.ca_dim).len() as f64 <= rate * c.ca_dim as f64);
            prop_assert!(s.occlusion.block(c.cf_dim).len() as f64 <= rate * c.cf_dim as f64);
        }
    }
}
