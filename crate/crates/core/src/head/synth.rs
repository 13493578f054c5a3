//! Procedural head-like assets for running without licensed model files.

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelAssets, Vec3};
use crate::error::{Error, Result};

const RADII: Vec3 = [0.075, 0.1, 0.09];
const SHAPE_RMS: f64 = 0.015;
const EXPR_RMS: f64 = 0.02;
const SKIN_SIGMA: f64 = 0.04;
const MAX_LANDMARKS: usize = 68;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub vertices: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    /// Non-root joints.
    pub joints: usize,
    pub seed: u64,
    /// Magnitude of the random pose-corrective basis; zero disables it.
    #[serde(default)]
    pub pose_corrective_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            vertices: 1000,
            shape_dim: 300,
            expr_dim: 50,
            joints: 4,
            seed: 0,
            pose_corrective_scale: 0.0,
        }
    }
}

/// Builds deterministic assets: an ellipsoid head facing +z with orthogonal
/// shape/expression bases whose unit-normal draws move vertices by a few
/// percent of the head radius.
pub fn synthesize_assets(cfg: &HeadConfig) -> Result<ModelAssets> {
    let n = cfg.vertices;
    if n < 12 {
        return Err(Error::Config(format!("need at least 12 vertices, got {n}")));
    }
    if cfg.joints < 1 {
        return Err(Error::Config("need at least one non-root joint".into()));
    }
    if cfg.shape_dim + cfg.expr_dim > 3 * n {
        return Err(Error::Config(format!(
            "{} basis directions do not fit in {} vertex coordinates",
            cfg.shape_dim + cfg.expr_dim,
            3 * n
        )));
    }
    if !cfg.pose_corrective_scale.is_finite() {
        return Err(Error::Config("pose corrective scale must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let rings = ring_sizes(n - 2);
    let (template, normals) = ellipsoid(&rings);
    let faces = triangulate(&rings, &template);
    let frontal_mask: Vec<bool> = normals.iter().map(|nrm| nrm[2] > 0.5).collect();
    let frontal: Vec<usize> = (0..n).filter(|&i| frontal_mask[i]).collect();
    let count = frontal.len().min(MAX_LANDMARKS);
    let landmarks = (0..count)
        .map(|k| frontal[k * frontal.len() / count])
        .collect();

    let (shape_basis, expr_basis) = blend_bases(&mut rng, n, cfg.shape_dim, cfg.expr_dim)?;

    let k = cfg.joints + 1;
    let anchors = joint_anchors(&mut rng, cfg.joints);
    let mut joint_regressor = vec![0.0; k * n];
    for (j, a) in anchors.iter().enumerate() {
        nearest_convex(&template, a, &mut joint_regressor[j * n..(j + 1) * n]);
    }
    let parents = (0..k)
        .map(|j| match j {
            0 => None,
            1 => Some(0),
            _ => Some(1),
        })
        .collect();
    let joints: Vec<Vec3> = joint_regressor
        .chunks(n)
        .map(|row| {
            let mut p = [0.0; 3];
            for (w, v) in row.iter().zip(&template) {
                (0..3).for_each(|c| p[c] += w * v[c]);
            }
            p
        })
        .collect();
    let skin_weights = skinning(&template, &joints);

    let pose_cols = 9 * cfg.joints;
    let pose_basis = if cfg.pose_corrective_scale == 0.0 {
        vec![0.0; 3 * n * pose_cols]
    } else {
        let s = cfg.pose_corrective_scale / (pose_cols as f64).sqrt();
        (0..3 * n * pose_cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
            .collect()
    };

    let assets = ModelAssets {
        template,
        shape_basis,
        shape_dim: cfg.shape_dim,
        expr_basis,
        expr_dim: cfg.expr_dim,
        pose_basis,
        joint_regressor,
        skin_weights,
        parents,
        frontal_mask,
        landmarks,
        faces,
    };
    assets.validate()?;
    Ok(assets)
}

/// Vertices per latitude ring, roughly proportional to ring circumference.
fn ring_sizes(body: usize) -> Vec<usize> {
    let mut r = (((body as f64) * std::f64::consts::PI / 4.0).sqrt().round() as usize).max(1);
    while 3 * r > body {
        r -= 1;
    }
    let weights: Vec<f64> = (0..r)
        .map(|i| (std::f64::consts::PI * (i + 1) as f64 / (r + 1) as f64).sin())
        .collect();
    let total: f64 = weights.iter().sum();
    let spare = body - 3 * r;
    let quotas: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| 3 + q.floor() as usize).collect();
    let mut left = body - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

fn ring_offset(ring: usize) -> f64 {
    if ring.is_multiple_of(2) {
        0.0
    } else {
        0.5
    }
}

/// Vertex positions and analytic unit normals: top pole, rings, bottom pole.
fn ellipsoid(rings: &[usize]) -> (Vec<Vec3>, Vec<Vec3>) {
    let [ax, ay, az] = RADII;
    let mut verts = vec![[0.0, ay, 0.0]];
    let r = rings.len();
    for (i, &size) in rings.iter().enumerate() {
        let phi = std::f64::consts::PI * (i + 1) as f64 / (r + 1) as f64;
        for j in 0..size {
            let lam = std::f64::consts::TAU * (j as f64 + ring_offset(i)) / size as f64;
            verts.push([
                ax * phi.sin() * lam.sin(),
                ay * phi.cos(),
                az * phi.sin() * lam.cos(),
            ]);
        }
    }
    verts.push([0.0, -ay, 0.0]);
    let normals = verts
        .iter()
        .map(|v| {
            let g = Vector3::new(v[0] / (ax * ax), v[1] / (ay * ay), v[2] / (az * az)).normalize();
            [g.x, g.y, g.z]
        })
        .collect();
    (verts, normals)
}

fn triangulate(rings: &[usize], verts: &[Vec3]) -> Vec<[u32; 3]> {
    let n = verts.len();
    let mut starts = Vec::with_capacity(rings.len());
    let mut s = 1;
    for &size in rings {
        starts.push(s);
        s += size;
    }
    let mut tris = Vec::new();
    let first = rings[0];
    for j in 0..first {
        tris.push([0, starts[0] + j, starts[0] + (j + 1) % first]);
    }
    for i in 0..rings.len() - 1 {
        let (a, b) = (rings[i], rings[i + 1]);
        let (sa, sb) = (starts[i], starts[i + 1]);
        let ua = |k: usize| (k as f64 + ring_offset(i)) / a as f64;
        let ub = |k: usize| (k as f64 + ring_offset(i + 1)) / b as f64;
        let (mut ia, mut ib) = (0, 0);
        while ia < a || ib < b {
            if ia < a && (ib == b || ua(ia + 1) < ub(ib + 1)) {
                tris.push([sa + ia, sa + (ia + 1) % a, sb + ib % b]);
                ia += 1;
            } else {
                tris.push([sa + ia % a, sb + (ib + 1) % b, sb + ib]);
                ib += 1;
            }
        }
    }
    let last = *rings.last().unwrap();
    let sl = *starts.last().unwrap();
    for j in 0..last {
        tris.push([n - 1, sl + j, sl + (j + 1) % last]);
    }
    tris.into_iter()
        .map(|t| {
            let [p, q, r] = t.map(|i| Vector3::from(verts[i]));
            let outward = (q - p).cross(&(r - p)).dot(&(p + q + r)) > 0.0;
            let t = if outward { t } else { [t[0], t[2], t[1]] };
            t.map(|i| i as u32)
        })
        .collect()
}

/// Shape and expression bases from one orthonormal frame, so every column is
/// orthogonal to every other across both spaces.
fn blend_bases(
    rng: &mut ChaCha8Rng,
    n: usize,
    sd: usize,
    ed: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cols = sd + ed;
    if cols == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let g = DMatrix::<f64>::from_fn(3 * n, cols, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let gain = |dim: usize, rms: f64| {
        let spread: f64 = (0..dim).map(|k| 1.0 / (1 + k) as f64).sum();
        rms * RADII[1] * (n as f64 / spread).sqrt()
    };
    let pack = |offset: usize, dim: usize, rms: f64| {
        let c = gain(dim, rms);
        let mut out = vec![0.0; 3 * n * dim];
        for row in 0..3 * n {
            for k in 0..dim {
                out[row * dim + k] = q[(row, offset + k)] * c / ((1 + k) as f64).sqrt();
            }
        }
        out
    };
    Ok((pack(0, sd, SHAPE_RMS), pack(sd, ed, EXPR_RMS)))
}

/// Rest positions that joints are snapped to: root, neck, jaw, eyes, then
/// random interior points for any extra joints.
fn joint_anchors(rng: &mut ChaCha8Rng, joints: usize) -> Vec<Vec3> {
    let fixed = [
        [0.0, -0.095, -0.01],
        [0.0, -0.08, -0.005],
        [0.0, -0.06, 0.06],
        [-0.03, 0.025, 0.08],
        [0.03, 0.025, 0.08],
    ];
    (0..=joints)
        .map(|j| {
            fixed.get(j).copied().unwrap_or_else(|| {
                let u: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                [0, 1, 2].map(|c| 0.9 * RADII[c] * u[c] / norm)
            })
        })
        .collect()
}

/// Writes inverse-distance weights over the 4 vertices nearest to `p`.
fn nearest_convex(verts: &[Vec3], p: &Vec3, row: &mut [f64]) {
    let dist =
        |v: &Vec3| ((v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2) + (v[2] - p[2]).powi(2)).sqrt();
    let mut idx: Vec<usize> = (0..verts.len()).collect();
    idx.sort_by(|&a, &b| dist(&verts[a]).total_cmp(&dist(&verts[b])).then(a.cmp(&b)));
    let near = &idx[..4];
    let w: Vec<f64> = near
        .iter()
        .map(|&i| 1.0 / (dist(&verts[i]) + 1e-6))
        .collect();
    let total: f64 = w.iter().sum();
    for (&i, wi) in near.iter().zip(w) {
        row[i] = wi / total;
    }
}

fn skinning(verts: &[Vec3], joints: &[Vec3]) -> Vec<f64> {
    let k = joints.len();
    let mut out = Vec::with_capacity(verts.len() * k);
    for v in verts {
        let d2: Vec<f64> = joints
            .iter()
            .map(|j| (0..3).map(|c| (v[c] - j[c]).powi(2)).sum::<f64>())
            .collect();
        let nearest = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d2
            .iter()
            .map(|d| (-(d - nearest) / (2.0 * SKIN_SIGMA * SKIN_SIGMA)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        out.extend(w.iter().map(|x| x / total));
    }
    out
}
