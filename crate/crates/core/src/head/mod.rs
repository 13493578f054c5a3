//! Linear parametric head model.
//!
//! A mesh is produced in three stages: linear blendshape offsets over a
//! template, joint regression from the shaped rest mesh, and linear blend
//! skinning along a kinematic chain. Coordinates are meters.

mod io;
mod synth;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

pub use io::{format_sig, read_obj_vertices, write_obj, ASSET_MAGIC};
pub use synth::{synthesize_assets, HeadConfig};

pub type Vec3 = [f64; 3];

/// Which coefficient space a vector belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoeffKind {
    Shape,
    Expression,
    Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub kind: CoeffKind,
    pub values: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(kind: CoeffKind, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient vector"));
        }
        Ok(CoefficientVector { kind, values })
    }

    pub fn zeros(kind: CoeffKind, dim: usize) -> Self {
        CoefficientVector {
            kind,
            values: vec![0.0; dim],
        }
    }

    pub fn shape(values: Vec<f64>) -> Result<Self> {
        Self::new(CoeffKind::Shape, values)
    }

    pub fn expression(values: Vec<f64>) -> Result<Self> {
        Self::new(CoeffKind::Expression, values)
    }

    pub fn pose(values: Vec<f64>) -> Result<Self> {
        Self::new(CoeffKind::Pose, values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Everything that defines the head model. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelAssets {
    pub template: Vec<Vec3>,
    /// n×3×|β|, vertex-major.
    pub shape_basis: Vec<f64>,
    pub shape_dim: usize,
    /// n×3×|ψ|.
    pub expr_basis: Vec<f64>,
    pub expr_dim: usize,
    /// n×3×9K, driven by `(R_j − I)` of every non-root joint.
    pub pose_basis: Vec<f64>,
    /// (K+1)×n, root joint first.
    pub joint_regressor: Vec<f64>,
    /// n×(K+1).
    pub skin_weights: Vec<f64>,
    pub parents: Vec<Option<usize>>,
    pub frontal_mask: Vec<bool>,
    pub landmarks: Vec<usize>,
    pub faces: Vec<[u32; 3]>,
}

impl ModelAssets {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    /// Joints including the root.
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.joint_count()
    }

    pub fn frontal_count(&self) -> usize {
        self.frontal_mask.iter().filter(|&&f| f).count()
    }

    pub fn frontal_indices(&self) -> Vec<usize> {
        (0..self.vertex_count())
            .filter(|&i| self.frontal_mask[i])
            .collect()
    }

    /// Checks every structural invariant of the assets.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        let j = self.joint_count();
        if n == 0 || j == 0 {
            return Err(Error::Degenerate(
                "assets need vertices and a root joint".into(),
            ));
        }
        ensure_dim(
            "shape basis",
            n * 3 * self.shape_dim,
            self.shape_basis.len(),
        )?;
        ensure_dim(
            "expression basis",
            n * 3 * self.expr_dim,
            self.expr_basis.len(),
        )?;
        ensure_dim("pose basis", n * 3 * 9 * (j - 1), self.pose_basis.len())?;
        ensure_dim("joint regressor", j * n, self.joint_regressor.len())?;
        ensure_dim("skinning weights", n * j, self.skin_weights.len())?;
        ensure_dim("frontal mask", n, self.frontal_mask.len())?;
        for row in self.skin_weights.chunks(j) {
            if row.iter().any(|&w| w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Degenerate(
                    "skinning weights must be a simplex per vertex".into(),
                ));
            }
        }
        for row in self.joint_regressor.chunks(n) {
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Degenerate(
                    "joint regressor rows must sum to one".into(),
                ));
            }
        }
        for (i, p) in self.parents.iter().enumerate() {
            match (i, p) {
                (0, None) => {}
                (i, Some(p)) if i > 0 && *p < i => {}
                _ => {
                    return Err(Error::Degenerate(format!(
                        "joint {i} has invalid parent {p:?}"
                    )))
                }
            }
        }
        if self.frontal_count() == 0 {
            return Err(Error::Empty("frontal mask"));
        }
        let mut seen = vec![false; n];
        for &l in &self.landmarks {
            if l >= n || std::mem::replace(&mut seen[l], true) {
                return Err(Error::Degenerate(format!(
                    "landmark {l} is out of range or repeated"
                )));
            }
        }
        for f in &self.faces {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::Degenerate("face references a missing vertex".into()));
            }
        }
        Ok(())
    }

    fn check(&self, c: &CoefficientVector, kind: CoeffKind, dim: usize) -> Result<()> {
        if c.kind != kind {
            return Err(Error::Config(format!(
                "expected {kind:?} coefficients, got {:?}",
                c.kind
            )));
        }
        ensure_dim(
            match kind {
                CoeffKind::Shape => "shape coefficients",
                CoeffKind::Expression => "expression coefficients",
                CoeffKind::Pose => "pose coefficients",
            },
            dim,
            c.dim(),
        )
    }

    /// Shaped rest mesh `𝒯 + B_S(β) + B_E(ψ)` (no pose correctives).
    pub fn shaped(&self, beta: &CoefficientVector, psi: &CoefficientVector) -> Result<Mesh> {
        self.check(beta, CoeffKind::Shape, self.shape_dim)?;
        self.check(psi, CoeffKind::Expression, self.expr_dim)?;
        let mut vertices = self.template.clone();
        add_basis(&mut vertices, &self.shape_basis, &beta.values, None);
        add_basis(&mut vertices, &self.expr_basis, &psi.values, None);
        Ok(Mesh { vertices })
    }

    /// `T_p = 𝒯 + B_S(β) + B_P(θ) + B_E(ψ)`.
    pub fn blend_shapes(
        &self,
        beta: &CoefficientVector,
        theta: &CoefficientVector,
        psi: &CoefficientVector,
    ) -> Result<Mesh> {
        self.check(theta, CoeffKind::Pose, self.pose_dim())?;
        let mut mesh = self.shaped(beta, psi)?;
        self.add_pose_correctives(&mut mesh, theta)?;
        Ok(mesh)
    }

    fn add_pose_correctives(&self, mesh: &mut Mesh, theta: &CoefficientVector) -> Result<()> {
        if theta.is_zero() || self.joint_count() < 2 {
            return Ok(());
        }
        let mut features = Vec::with_capacity(9 * (self.joint_count() - 1));
        for j in 1..self.joint_count() {
            let r = rodrigues(joint_axis_angle(&theta.values, j))?;
            for row in 0..3 {
                for col in 0..3 {
                    features.push(r[(row, col)] - if row == col { 1.0 } else { 0.0 });
                }
            }
        }
        add_basis(&mut mesh.vertices, &self.pose_basis, &features, None);
        Ok(())
    }

    /// Joint locations `𝒥 · vertices`, root first.
    pub fn regress_joints(&self, rest: &Mesh) -> Result<Vec<Vec3>> {
        let n = self.vertex_count();
        ensure_dim("rest vertices", n, rest.len())?;
        Ok(self
            .joint_regressor
            .chunks(n)
            .map(|row| {
                let mut j = [0.0; 3];
                for (w, v) in row.iter().zip(&rest.vertices) {
                    for c in 0..3 {
                        j[c] += w * v[c];
                    }
                }
                j
            })
            .collect())
    }

    /// Poses `rest` with per-joint axis-angle rotations composed along the chain.
    pub fn lbs(&self, rest: &Mesh, joints: &[Vec3], theta: &CoefficientVector) -> Result<Mesh> {
        self.check(theta, CoeffKind::Pose, self.pose_dim())?;
        ensure_dim("rest vertices", self.vertex_count(), rest.len())?;
        ensure_dim("joints", self.joint_count(), joints.len())?;
        if theta.is_zero() {
            return Ok(rest.clone());
        }
        let transforms = self.skinning_transforms(joints, theta)?;
        let k = self.joint_count();
        let vertices = rest
            .vertices
            .iter()
            .zip(self.skin_weights.chunks(k))
            .map(|(v, w)| {
                let mut rot = Matrix3::zeros();
                let mut trans = Vector3::zeros();
                for (wj, (r, t)) in w.iter().zip(&transforms) {
                    if *wj != 0.0 {
                        rot += r * *wj;
                        trans += t * *wj;
                    }
                }
                let p = rot * Vector3::from(*v) + trans;
                [p.x, p.y, p.z]
            })
            .collect();
        Ok(Mesh { vertices })
    }

    /// Per-joint transforms `x ↦ R x + t` that map rest space to posed space.
    fn skinning_transforms(
        &self,
        joints: &[Vec3],
        theta: &CoefficientVector,
    ) -> Result<Vec<(Matrix3<f64>, Vector3<f64>)>> {
        let mut world: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(joints.len());
        for (j, parent) in self.parents.iter().enumerate() {
            let local = rodrigues(joint_axis_angle(&theta.values, j))?;
            let jl = Vector3::from(joints[j]);
            let g = match parent {
                None => (local, jl),
                Some(p) => {
                    let (pr, pt) = world[*p];
                    (pr * local, pr * (jl - Vector3::from(joints[*p])) + pt)
                }
            };
            world.push(g);
        }
        Ok(world
            .into_iter()
            .zip(joints)
            .map(|((r, t), j)| (r, t - r * Vector3::from(*j)))
            .collect())
    }

    /// `M(β, θ, ψ) = LBS(T_p, 𝒥(β, ψ), θ, 𝒲)`.
    pub fn reconstruct(
        &self,
        beta: &CoefficientVector,
        theta: &CoefficientVector,
        psi: &CoefficientVector,
    ) -> Result<Mesh> {
        self.check(theta, CoeffKind::Pose, self.pose_dim())?;
        let shaped = self.shaped(beta, psi)?;
        let joints = self.regress_joints(&shaped)?;
        let mut rest = shaped;
        self.add_pose_correctives(&mut rest, theta)?;
        let mesh = self.lbs(&rest, &joints, theta)?;
        if mesh.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reconstructed mesh"));
        }
        Ok(mesh)
    }

    /// Frontal vertices in ascending index order.
    pub fn extract_frontal(&self, mesh: &Mesh) -> Result<Vec<Vec3>> {
        ensure_dim("mesh vertices", self.vertex_count(), mesh.len())?;
        let out: Vec<Vec3> = mesh
            .vertices
            .iter()
            .zip(&self.frontal_mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        if out.is_empty() {
            return Err(Error::Empty("frontal mask"));
        }
        Ok(out)
    }

    /// Frontal vertices of the neutral, unposed head for shape `β`.
    ///
    /// Equal to `extract_frontal(reconstruct(β, 0, 0))`, evaluated only on the
    /// frontal rows.
    pub fn frontal_neutral(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        ensure_dim("shape coefficients", self.shape_dim, beta.len())?;
        let mut out = Vec::with_capacity(self.frontal_count());
        for (i, _) in self.frontal_mask.iter().enumerate().filter(|(_, &m)| m) {
            let mut v = self.template[i];
            add_basis_row(&mut v, &self.shape_basis, beta, i);
            // the zero expression contributes exact zeros, matching `shaped`
            out.push(v);
        }
        Ok(out)
    }
}

fn joint_axis_angle(theta: &[f64], j: usize) -> Vec3 {
    [theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]]
}

fn add_basis_row(v: &mut Vec3, basis: &[f64], coeffs: &[f64], vertex: usize) {
    let dim = coeffs.len();
    for (c, slot) in v.iter_mut().enumerate() {
        let row = &basis[(vertex * 3 + c) * dim..][..dim];
        *slot += row.iter().zip(coeffs).map(|(b, x)| b * x).sum::<f64>();
    }
}

fn add_basis(vertices: &mut [Vec3], basis: &[f64], coeffs: &[f64], only: Option<&[bool]>) {
    if coeffs.is_empty() {
        return;
    }
    for (i, v) in vertices.iter_mut().enumerate() {
        if only.is_some_and(|m| !m[i]) {
            continue;
        }
        add_basis_row(v, basis, coeffs, i);
    }
}

/// Axis-angle to rotation matrix; first-order expansion below 1e-8 rad.
pub fn rodrigues(w: Vec3) -> Result<Matrix3<f64>> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("axis-angle rotation"));
    }
    let w = Vector3::from(w);
    let angle = w.norm();
    let skew = |k: &Vector3<f64>| Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    if angle < 1e-8 {
        return Ok(Matrix3::identity() + skew(&w));
    }
    let k = skew(&(w / angle));
    Ok(Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_assets() -> ModelAssets {
        synthesize_assets(&HeadConfig {
            vertices: 60,
            shape_dim: 8,
            expr_dim: 4,
            joints: 4,
            seed: 1,
            pose_corrective_scale: 0.0,
        })
        .unwrap()
    }

    fn zeros(a: &ModelAssets) -> (CoefficientVector, CoefficientVector, CoefficientVector) {
        (
            CoefficientVector::zeros(CoeffKind::Shape, a.shape_dim),
            CoefficientVector::zeros(CoeffKind::Pose, a.pose_dim()),
            CoefficientVector::zeros(CoeffKind::Expression, a.expr_dim),
        )
    }

    #[test]
    fn zero_coefficients_reproduce_template_exactly() {
        let a = small_assets();
        let (b, t, e) = zeros(&a);
        assert_eq!(a.reconstruct(&b, &t, &e).unwrap().vertices, a.template);
        assert_eq!(a.blend_shapes(&b, &t, &e).unwrap().vertices, a.template);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = small_assets();
        let (_, t, e) = zeros(&a);
        let bad = CoefficientVector::zeros(CoeffKind::Shape, a.shape_dim + 1);
        assert!(matches!(
            a.blend_shapes(&bad, &t, &e),
            Err(Error::Dimension { .. })
        ));
        let wrong_kind = CoefficientVector::zeros(CoeffKind::Expression, a.shape_dim);
        assert!(a.blend_shapes(&wrong_kind, &t, &e).is_err());
    }

    #[test]
    fn non_finite_rotation_is_rejected() {
        assert!(rodrigues([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rodrigues_small_angle_branch_is_first_order() {
        let r = rodrigues([1e-10, 0.0, 0.0]).unwrap();
        assert_eq!(r[(2, 1)], 1e-10);
        assert_eq!(r[(1, 2)], -1e-10);
        assert_eq!(r[(0, 0)], 1.0);
    }

    #[test]
    fn frontal_neutral_matches_full_reconstruction() {
        let a = small_assets();
        let beta: Vec<f64> = (0..a.shape_dim).map(|k| (k as f64 * 0.7).sin()).collect();
        let (_, t, e) = zeros(&a);
        let mesh = a
            .reconstruct(&CoefficientVector::shape(beta.clone()).unwrap(), &t, &e)
            .unwrap();
        assert_eq!(
            a.extract_frontal(&mesh).unwrap(),
            a.frontal_neutral(&beta).unwrap()
        );
    }

    #[test]
    fn invalid_assets_fail_validation() {
        let mut a = small_assets();
        a.validate().unwrap();
        a.skin_weights[0] += 0.1;
        assert!(a.validate().is_err());
        let mut a = small_assets();
        a.landmarks.push(a.landmarks[0]);
        assert!(a.validate().is_err());
        let mut a = small_assets();
        a.frontal_mask.iter_mut().for_each(|m| *m = false);
        assert!(matches!(a.validate(), Err(Error::Empty(_))));
    }
}
