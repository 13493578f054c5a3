//! Builds a synthetic head model, poses it, and writes OBJ files.
//!
//! `cargo run --release --example head_model -- [out_dir]`

use std::path::PathBuf;

use occface::head::{synthesize_assets, write_obj, CoefficientVector, HeadConfig};

fn main() -> occface::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "head-model-out".into()),
    );
    std::fs::create_dir_all(&out)?;
    let assets = synthesize_assets(&HeadConfig::default())?;
    println!(
        "{} vertices, {} faces, {} shape / {} expression coefficients, {} joints, {} frontal vertices",
        assets.vertex_count(),
        assets.faces.len(),
        assets.shape_dim,
        assets.expr_dim,
        assets.joint_count(),
        assets.frontal_count()
    );

    let mut beta = vec![0.0; assets.shape_dim];
    beta[0] = 2.0;
    beta[3] = -1.5;
    let mut psi = vec![0.0; assets.expr_dim];
    psi[1] = 1.5;
    // open the jaw by 20 degrees about x
    let mut theta = vec![0.0; assets.pose_dim()];
    let jaw = 2;
    theta[3 * jaw] = 20f64.to_radians();

    let shape = CoefficientVector::shape(beta)?;
    let expr = CoefficientVector::expression(psi)?;
    let pose = CoefficientVector::pose(theta)?;
    let neutral = assets.reconstruct(
        &shape,
        &CoefficientVector::zeros(pose.kind, pose.dim()),
        &expr,
    )?;
    let posed = assets.reconstruct(&shape, &pose, &expr)?;

    write_obj(&out.join("template.obj"), &assets.template, &assets.faces)?;
    write_obj(
        &out.join("neutral_pose.obj"),
        &neutral.vertices,
        &assets.faces,
    )?;
    write_obj(&out.join("jaw_open.obj"), &posed.vertices, &assets.faces)?;
    let moved = posed
        .vertices
        .iter()
        .zip(&neutral.vertices)
        .filter(|(a, b)| a != b)
        .count();
    println!(
        "jaw rotation moved {moved} vertices; meshes written to {}",
        out.display()
    );
    Ok(())
}
