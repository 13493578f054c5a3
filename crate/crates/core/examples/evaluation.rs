//! Scores perturbed reconstructions with both evaluation protocols.
//!
//! `cargo run --release --example evaluation`

use occface::eval::{
    build_masked_protocol, co545_style_stats, now_style_stats, AlignmentMode, Camera, EvalPair,
    OcclusionMask,
};
use occface::head::{synthesize_assets, HeadConfig, Mesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> occface::Result<()> {
    let assets = synthesize_assets(&HeadConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frontal = assets.frontal_indices();
    let gt_meshes: Vec<Mesh> = (0..6)
        .map(|_| {
            let beta: Vec<f64> = (0..assets.shape_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let beta = occface::head::CoefficientVector::shape(beta).unwrap();
            let psi = occface::head::CoefficientVector::zeros(
                occface::head::CoeffKind::Expression,
                assets.expr_dim,
            );
            assets.shaped(&beta, &psi).unwrap()
        })
        .collect();
    // upper half of the face hidden on every other input
    let masks: Vec<OcclusionMask> = (0..gt_meshes.len())
        .map(|i| {
            if i % 2 == 0 {
                OcclusionMask::None
            } else {
                OcclusionMask::Region {
                    min: [-1.0, 0.0],
                    max: [1.0, 1.0],
                }
            }
        })
        .collect();
    let items = build_masked_protocol(&assets, &gt_meshes, &masks, &Camera::default())?;

    let mut now_pairs = Vec::new();
    let mut co_pairs = Vec::new();
    for (item, gt) in items.iter().zip(&gt_meshes) {
        // a rigidly moved, slightly noisy prediction
        let angle: f64 = rng.random_range(-0.3..0.3);
        let (s, c) = angle.sin_cos();
        let pred: Vec<[f64; 3]> = gt
            .vertices
            .iter()
            .map(|p| {
                [
                    c * p[0] + s * p[2] + 0.01,
                    p[1] - 0.02,
                    -s * p[0] + c * p[2],
                ]
            })
            .map(|p| p.map(|v| v + rng.random_range(-0.0005..0.0005)))
            .collect();
        let pred = Mesh { vertices: pred };
        co_pairs.push(item.pair(pred.clone(), gt, &[]));
        now_pairs.push(EvalPair {
            id: item.id.clone(),
            predicted: Mesh {
                vertices: frontal.iter().map(|&i| pred.vertices[i]).collect(),
            },
            ground_truth: frontal.iter().map(|&i| gt.vertices[i]).collect(),
            visible: vec![true; frontal.len()],
            landmarks: vec![],
            occluded: item.occluded,
        });
    }
    for report in [
        now_style_stats(&now_pairs, AlignmentMode::NonMetrical)?,
        co545_style_stats(&co_pairs, AlignmentMode::Metrical)?,
    ] {
        let s = report.summary;
        println!(
            "{:<12} {:<13} median {:.4} mm  mean {:.4} mm  std {:.4} mm",
            report.protocol,
            report.alignment.as_str(),
            s.median,
            s.mean,
            s.std
        );
        for sub in report.split()? {
            println!(
                "  {:<11} median {:.4} mm over {} inputs",
                sub.subset, sub.summary.median, sub.summary.count
            );
        }
    }
    let visible: Vec<usize> = items
        .iter()
        .map(|i| i.visible.iter().filter(|&&v| v).count())
        .collect();
    println!("visible vertices per input: {visible:?}");
    println!(
        "{}",
        now_style_stats(&now_pairs, AlignmentMode::NonMetrical)?.to_csv()
    );
    Ok(())
}
