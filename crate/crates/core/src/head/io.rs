use std::fmt::Write as _;
use std::path::Path;

use gradcore::container::{BlobData, Container};
use serde_json::json;

use super::{ModelAssets, Vec3};
use crate::error::{Error, Result};

pub const ASSET_MAGIC: &[u8; 8] = b"OFERASST";

/// `%.9g`: nine significant digits, trailing zeros trimmed.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_obj(path: &Path, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    std::fs::write(path, obj_string(vertices, faces))?;
    Ok(())
}

pub(crate) fn obj_string(vertices: &[Vec3], faces: &[[u32; 3]]) -> String {
    let mut s = String::with_capacity(40 * vertices.len() + 24 * faces.len());
    for v in vertices {
        let _ = writeln!(
            s,
            "v {} {} {}",
            format_sig(v[0]),
            format_sig(v[1]),
            format_sig(v[2])
        );
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn read_obj_vertices(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let mut v = [0.0; 3];
        for slot in &mut v {
            *slot = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: malformed vertex",
                    path.display(),
                    line_no + 1
                ))
            })?;
        }
        out.push(v);
    }
    Ok(out)
}

impl ModelAssets {
    pub fn to_container(&self) -> Container {
        let n = self.vertex_count();
        let k = self.joint_count();
        let mut c = Container::new(json!({
            "vertices": n,
            "shape_dim": self.shape_dim,
            "expr_dim": self.expr_dim,
            "joints": k,
        }));
        let flat = |v: &[Vec3]| v.iter().flatten().copied().collect::<Vec<f64>>();
        c.push("template", vec![n, 3], BlobData::F64(flat(&self.template)));
        c.push(
            "shape_basis",
            vec![n, 3, self.shape_dim],
            BlobData::F64(self.shape_basis.clone()),
        );
        c.push(
            "expr_basis",
            vec![n, 3, self.expr_dim],
            BlobData::F64(self.expr_basis.clone()),
        );
        c.push(
            "pose_basis",
            vec![n, 3, 9 * (k - 1)],
            BlobData::F64(self.pose_basis.clone()),
        );
        c.push(
            "joint_regressor",
            vec![k, n],
            BlobData::F64(self.joint_regressor.clone()),
        );
        c.push(
            "skin_weights",
            vec![n, k],
            BlobData::F64(self.skin_weights.clone()),
        );
        // root parent is stored as u32::MAX
        let parents = self
            .parents
            .iter()
            .map(|p| p.map_or(u32::MAX, |p| p as u32))
            .collect();
        c.push("parents", vec![k], BlobData::U32(parents));
        c.push(
            "frontal_mask",
            vec![n],
            BlobData::U8(self.frontal_mask.iter().map(|&b| b as u8).collect()),
        );
        c.push(
            "landmarks",
            vec![self.landmarks.len()],
            BlobData::U32(self.landmarks.iter().map(|&i| i as u32).collect()),
        );
        c.push(
            "faces",
            vec![self.faces.len(), 3],
            BlobData::U32(self.faces.iter().flatten().copied().collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let blob = |name: &str| {
            c.get(name)
                .ok_or_else(|| Error::Config(format!("asset file lacks `{name}`")))
        };
        let f64s = |name: &str| match &blob(name)?.data {
            BlobData::F64(v) => Ok(v.clone()),
            _ => Err(Error::Config(format!("`{name}` must be f64"))),
        };
        let u32s = |name: &str| match &blob(name)?.data {
            BlobData::U32(v) => Ok(v.clone()),
            _ => Err(Error::Config(format!("`{name}` must be u32"))),
        };
        let last_dim = |name: &str| -> Result<usize> {
            blob(name)?
                .shape
                .last()
                .copied()
                .ok_or_else(|| Error::Config(format!("`{name}` has no shape")))
        };
        let template: Vec<Vec3> = f64s("template")?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let mask = match &blob("frontal_mask")?.data {
            BlobData::U8(v) => v.iter().map(|&b| b != 0).collect(),
            _ => return Err(Error::Config("`frontal_mask` must be u8".into())),
        };
        let assets = ModelAssets {
            template,
            shape_dim: last_dim("shape_basis")?,
            shape_basis: f64s("shape_basis")?,
            expr_dim: last_dim("expr_basis")?,
            expr_basis: f64s("expr_basis")?,
            pose_basis: f64s("pose_basis")?,
            joint_regressor: f64s("joint_regressor")?,
            skin_weights: f64s("skin_weights")?,
            parents: u32s("parents")?
                .into_iter()
                .map(|p| (p != u32::MAX).then_some(p as usize))
                .collect(),
            frontal_mask: mask,
            landmarks: u32s("landmarks")?.into_iter().map(|i| i as usize).collect(),
            faces: u32s("faces")?
                .chunks_exact(3)
                .map(|f| [f[0], f[1], f[2]])
                .collect(),
        };
        assets.validate()?;
        Ok(assets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_file(ASSET_MAGIC, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_file(ASSET_MAGIC, path)?)
    }
}
