//! Rigid-aligned error statistics and the occlusion-masked RMSE protocol.
//!
//! Distances are point-to-point over known vertex correspondences. Model
//! space is meters; every reported error is in millimeters.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::head::{Mesh, ModelAssets, Vec3};

pub const MM_PER_M: f64 = 1000.0;

/// Stated in every report so consumers do not mistake these numbers for
/// scan-to-surface distances.
pub const DISTANCE_NOTE: &str =
    "point-to-point vertex distances over known correspondences, millimeters";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Rotation, translation and uniform scale.
    NonMetrical,
    /// Rotation and translation only.
    Metrical,
}

impl AlignmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMode::NonMetrical => "non_metrical",
            AlignmentMode::Metrical => "metrical",
        }
    }
}

/// `x ↦ s·R·x + t`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let q = self.rotation * Vector3::from(p) * self.scale + self.translation;
        [q.x, q.y, q.z]
    }
}

fn centroid(points: &[Vec3]) -> Vector3<f64> {
    points
        .iter()
        .map(|&p| Vector3::from(p))
        .sum::<Vector3<f64>>()
        / points.len() as f64
}

/// Least-squares transform taking `source` onto `target` (Umeyama), with the
/// rotation constrained to determinant +1.
pub fn procrustes_align(
    source: &[Vec3],
    target: &[Vec3],
    mode: AlignmentMode,
) -> Result<Transform> {
    ensure_dim("alignment targets", source.len(), target.len())?;
    if source.len() < 3 {
        return Err(Error::Degenerate(format!(
            "alignment needs at least 3 correspondences, got {}",
            source.len()
        )));
    }
    if source
        .iter()
        .chain(target)
        .flatten()
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("alignment points"));
    }
    let n = source.len() as f64;
    let (ms, mt) = (centroid(source), centroid(target));
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut src_var = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = Vector3::from(*s) - ms;
        let dt = Vector3::from(*t) - mt;
        cov += dt * ds.transpose();
        src_cov += ds * ds.transpose();
        src_var += ds.norm_squared();
    }
    cov /= n;
    src_var /= n;
    // collinear or coincident sources leave the rotation about their axis free
    let spread = src_cov.symmetric_eigenvalues();
    let mut spread: Vec<f64> = spread.iter().copied().collect();
    spread.sort_by(|a, b| b.total_cmp(a));
    if spread[0].is_nan() || spread[0] <= 0.0 || spread[1] <= 1e-12 * spread[0] {
        return Err(Error::Degenerate(
            "rank-deficient alignment configuration".into(),
        ));
    }
    if source == target {
        // exact fit; skipping the decomposition keeps self-comparison at exactly 0
        return Ok(Transform::identity());
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = match mode {
        AlignmentMode::Metrical => 1.0,
        AlignmentMode::NonMetrical => {
            (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / src_var
        }
    };
    Ok(Transform {
        scale,
        rotation,
        translation: mt - rotation * ms * scale,
    })
}

/// A prediction matched to its ground truth with the evaluation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub predicted: Mesh,
    pub ground_truth: Vec<Vec3>,
    /// `V_unocc`: one flag per evaluation vertex.
    pub visible: Vec<bool>,
    /// Alignment correspondences; only the visible ones are used. Empty means
    /// align on every visible vertex.
    pub landmarks: Vec<usize>,
    /// Subset label for occluded/unoccluded splits.
    pub occluded: bool,
}

impl EvalPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.ground_truth.len();
        ensure_dim("predicted vertices", n, self.predicted.vertices.len())?;
        ensure_dim("visibility mask", n, self.visible.len())?;
        if let Some(&bad) = self.landmarks.iter().find(|&&l| l >= n) {
            return Err(Error::Config(format!(
                "landmark {bad} is out of range for {n} vertices"
            )));
        }
        if !self.visible.iter().any(|&v| v) {
            return Err(Error::Empty("visible vertex set"));
        }
        Ok(())
    }

    fn alignment_indices(&self) -> Vec<usize> {
        if self.landmarks.is_empty() {
            (0..self.visible.len())
                .filter(|&i| self.visible[i])
                .collect()
        } else {
            self.landmarks
                .iter()
                .copied()
                .filter(|&i| self.visible[i])
                .collect()
        }
    }

    /// Predicted vertices aligned onto the ground truth.
    pub fn aligned(&self, mode: AlignmentMode) -> Result<Vec<Vec3>> {
        self.validate()?;
        let idx = self.alignment_indices();
        if idx.len() < 3 {
            return Err(Error::Degenerate(format!(
                "only {} visible alignment landmarks",
                idx.len()
            )));
        }
        let src: Vec<Vec3> = idx.iter().map(|&i| self.predicted.vertices[i]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&i| self.ground_truth[i]).collect();
        let tr = procrustes_align(&src, &dst, mode)?;
        Ok(self
            .predicted
            .vertices
            .iter()
            .map(|&p| tr.apply(p))
            .collect())
    }

    fn visible_distances(&self, mode: AlignmentMode) -> Result<Vec<f64>> {
        let aligned = self.aligned(mode)?;
        Ok((0..aligned.len())
            .filter(|&i| self.visible[i])
            .map(|i| dist(aligned[i], self.ground_truth[i]) * MM_PER_M)
            .collect())
    }

    /// RMSE (mm) of per-vertex distances over `V_unocc` after alignment.
    pub fn rmse(&self, mode: AlignmentMode) -> Result<f64> {
        let d = self.visible_distances(mode)?;
        Ok((d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
    }

    /// Mean per-vertex distance (mm) over `V_unocc` after alignment.
    pub fn mean_distance(&self, mode: AlignmentMode) -> Result<f64> {
        let d = self.visible_distances(mode)?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Aligns on the visible landmarks (all visible vertices when `landmarks` is
/// empty) and returns the RMSE in millimeters over the visible vertices.
pub fn masked_vertex_rmse(
    predicted: &[Vec3],
    ground_truth: &[Vec3],
    visible: &[bool],
    landmarks: &[usize],
    mode: AlignmentMode,
) -> Result<f64> {
    EvalPair {
        id: String::new(),
        predicted: Mesh {
            vertices: predicted.to_vec(),
        },
        ground_truth: ground_truth.to_vec(),
        visible: visible.to_vec(),
        landmarks: landmarks.to_vec(),
        occluded: false,
    }
    .rmse(mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Statistics over a list; sorted before summing so that any ordering of
    /// the same values gives bit-identical results.
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Empty("error list"));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("error list"));
        }
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let mut sq: Vec<f64> = v.iter().map(|e| (e - mean).powi(2)).collect();
        sq.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Ok(Summary {
            median,
            mean,
            std: (sq.iter().sum::<f64>() / n as f64).sqrt(),
            count: n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub id: String,
    pub occluded: bool,
    pub error_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub alignment: AlignmentMode,
    /// `all`, `occluded` or `unoccluded`, or a caller-chosen row label.
    pub subset: String,
    pub distances: String,
    pub summary: Summary,
    pub pairs: Vec<PairError>,
}

impl EvalReport {
    pub fn new(
        protocol: &str,
        alignment: AlignmentMode,
        subset: &str,
        pairs: Vec<PairError>,
    ) -> Result<Self> {
        let errors: Vec<f64> = pairs.iter().map(|p| p.error_mm).collect();
        Ok(EvalReport {
            protocol: protocol.into(),
            alignment,
            subset: subset.into(),
            distances: DISTANCE_NOTE.into(),
            summary: Summary::from_errors(&errors)?,
            pairs,
        })
    }

    /// Reports restricted to the occluded and unoccluded pairs, skipping an
    /// empty side.
    pub fn split(&self) -> Result<Vec<EvalReport>> {
        let mut out = Vec::new();
        for (label, flag) in [("unoccluded", false), ("occluded", true)] {
            let rows: Vec<PairError> = self
                .pairs
                .iter()
                .filter(|p| p.occluded == flag)
                .cloned()
                .collect();
            if !rows.is_empty() {
                out.push(EvalReport::new(
                    &self.protocol,
                    self.alignment,
                    label,
                    rows,
                )?);
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {DISTANCE_NOTE}\nid,occluded,error_mm\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{}\n", p.id, p.occluded as u8, p.error_mm));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-pair mean vertex error after alignment, summarised as median/mean/std.
pub fn now_style_stats(pairs: &[EvalPair], mode: AlignmentMode) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let rows = pairs
        .iter()
        .map(|p| {
            Ok(PairError {
                id: p.id.clone(),
                occluded: p.occluded,
                error_mm: p.mean_distance(mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new("now_style", mode, "all", rows)
}

/// Per-pair masked RMSE, summarised the same way.
pub fn co545_style_stats(pairs: &[EvalPair], mode: AlignmentMode) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let rows = pairs
        .iter()
        .map(|p| {
            Ok(PairError {
                id: p.id.clone(),
                occluded: p.occluded,
                error_mm: p.rmse(mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new("co545_style", mode, "all", rows)
}

/// Orthographic camera looking along `view`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view: Vec3,
}

impl Default for Camera {
    /// Frontal view of a head facing +z.
    fn default() -> Self {
        Camera {
            view: [0.0, 0.0, -1.0],
        }
    }
}

impl Camera {
    fn axes(&self) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
        let w = Vector3::from(self.view);
        let len = w.norm();
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::Config(
                "camera view direction must be a nonzero vector".into(),
            ));
        }
        let w = w / len;
        let helper = if w.y.abs() < 0.9 {
            Vector3::y()
        } else {
            Vector3::x()
        };
        let u = helper.cross(&w).normalize();
        let v = w.cross(&u);
        Ok((u, v, w))
    }

    /// Image-plane coordinates of a point.
    pub fn project(&self, p: Vec3) -> Result<[f64; 2]> {
        let (u, v, _) = self.axes()?;
        let p = Vector3::from(p);
        Ok([u.dot(&p), v.dot(&p)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OcclusionMask {
    None,
    /// Vertex indices hidden by the occluder.
    Vertices {
        indices: Vec<usize>,
    },
    /// Axis-aligned rectangle in image-plane coordinates.
    Region {
        min: [f64; 2],
        max: [f64; 2],
    },
}

impl OcclusionMask {
    pub fn is_none(&self) -> bool {
        matches!(self, OcclusionMask::None)
    }
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<Vec3>> {
    let mut acc = vec![Vector3::<f64>::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|i| i as usize);
        if a.max(b).max(c) >= vertices.len() {
            return Err(Error::Config("face references a missing vertex".into()));
        }
        let (pa, pb, pc) = (
            Vector3::from(vertices[a]),
            Vector3::from(vertices[b]),
            Vector3::from(vertices[c]),
        );
        let n = (pb - pa).cross(&(pc - pa));
        for i in [a, b, c] {
            acc[i] += n;
        }
    }
    Ok(acc
        .into_iter()
        .map(|n| {
            let l = n.norm();
            if l > 0.0 {
                [n.x / l, n.y / l, n.z / l]
            } else {
                [0.0; 3]
            }
        })
        .collect())
}

/// `V_unocc`: facing the camera, inside `region` (when given), and outside
/// the occluder.
pub fn visible_vertices(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    region: Option<&[bool]>,
    mask: &OcclusionMask,
    camera: &Camera,
) -> Result<Vec<bool>> {
    if let Some(r) = region {
        ensure_dim("region mask", vertices.len(), r.len())?;
    }
    let normals = vertex_normals(vertices, faces)?;
    let (_, _, w) = camera.axes()?;
    let mut visible: Vec<bool> = normals
        .iter()
        .enumerate()
        .map(|(i, n)| Vector3::from(*n).dot(&w) < 0.0 && region.is_none_or(|r| r[i]))
        .collect();
    match mask {
        OcclusionMask::None => {}
        OcclusionMask::Vertices { indices } => {
            for &i in indices {
                if i >= vertices.len() {
                    return Err(Error::Config(format!(
                        "occluded vertex {i} is out of range"
                    )));
                }
                visible[i] = false;
            }
        }
        OcclusionMask::Region { min, max } => {
            for (i, &p) in vertices.iter().enumerate() {
                let [x, y] = camera.project(p)?;
                if x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1] {
                    visible[i] = false;
                }
            }
        }
    }
    if !visible.iter().any(|&v| v) {
        return Err(Error::Empty("visible vertex set"));
    }
    Ok(visible)
}

/// One protocol entry: which vertices of a ground-truth mesh are scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolItem {
    pub id: String,
    pub mask: OcclusionMask,
    pub occluded: bool,
    pub visible: Vec<bool>,
}

impl ProtocolItem {
    pub fn pair(&self, predicted: Mesh, ground_truth: &Mesh, landmarks: &[usize]) -> EvalPair {
        EvalPair {
            id: self.id.clone(),
            predicted,
            ground_truth: ground_truth.vertices.clone(),
            visible: self.visible.clone(),
            landmarks: landmarks.to_vec(),
            occluded: self.occluded,
        }
    }
}

/// Builds the scored vertex set for each ground-truth mesh: camera-facing
/// facial vertices that the occluder does not cover.
pub fn build_masked_protocol(
    assets: &ModelAssets,
    ground_truth: &[Mesh],
    masks: &[OcclusionMask],
    camera: &Camera,
) -> Result<Vec<ProtocolItem>> {
    ensure_dim("occlusion masks", ground_truth.len(), masks.len())?;
    ground_truth
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (mesh, mask))| {
            ensure_dim(
                "ground-truth vertices",
                assets.vertex_count(),
                mesh.vertices.len(),
            )?;
            let visible = visible_vertices(
                &mesh.vertices,
                &assets.faces,
                Some(&assets.frontal_mask),
                mask,
                camera,
            )
            .map_err(|e| match e {
                Error::Empty(_) => {
                    Error::Degenerate(format!("protocol item {i}: no visible vertices remain"))
                }
                other => other,
            })?;
            Ok(ProtocolItem {
                id: format!("item{i:04}"),
                mask: mask.clone(),
                occluded: !mask.is_none(),
                visible,
            })
        })
        .collect()
}
