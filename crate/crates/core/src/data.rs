//! Synthetic paired data: ground-truth coefficients and the condition
//! embeddings an image encoder would produce for them, with occlusion
//! modelled as masked embedding coordinates.

use std::path::Path;

use gradcore::container::{BlobData, Container};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::head::{CoefficientVector, ModelAssets, Vec3};

pub const DATASET_MAGIC: &[u8; 8] = b"OFERDATA";

/// Length of the encoder bias relative to the expected length of `W·x`.
const BIAS_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub expressions_per_identity: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    pub ca_dim: usize,
    pub cf_dim: usize,
    /// Fraction of embedding coordinates hidden in an occluded sample.
    pub occlusion_rate: f64,
    /// Probability that a sample is occluded at all.
    pub occluded_fraction: f64,
    pub noise_sigma: f64,
    /// Standard deviation of the ground-truth coefficient draws.
    pub coeff_scale: f64,
    /// The last `val_identities` identities form the validation split.
    pub val_identities: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 64,
            expressions_per_identity: 32,
            shape_dim: 300,
            expr_dim: 50,
            ca_dim: 512,
            cf_dim: 512,
            occlusion_rate: 0.5,
            occluded_fraction: 0.5,
            noise_sigma: 0.002,
            coeff_scale: 1.0,
            val_identities: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("identities", self.identities),
            ("expressions_per_identity", self.expressions_per_identity),
            ("shape_dim", self.shape_dim),
            ("expr_dim", self.expr_dim),
            ("ca_dim", self.ca_dim),
            ("cf_dim", self.cf_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("occlusion_rate", self.occlusion_rate),
            ("occluded_fraction", self.occluded_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(
                "noise_sigma must be a finite non-negative number".into(),
            ));
        }
        if !(self.coeff_scale > 0.0 && self.coeff_scale.is_finite()) {
            return Err(Error::Config("coeff_scale must be positive".into()));
        }
        if self.val_identities > self.identities {
            return Err(Error::Config("val_identities exceeds identities".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.identities * self.expressions_per_identity
    }

    /// Width of `c_a ∥ c_f`.
    pub fn joint_cond_dim(&self) -> usize {
        self.ca_dim + self.cf_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    None,
    Eyes,
    Mouth,
    Random,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::None => "none",
            Region::Eyes => "eyes",
            Region::Mouth => "mouth",
            Region::Random => "random",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Region::None,
            1 => Region::Eyes,
            2 => Region::Mouth,
            3 => Region::Random,
            _ => return Err(Error::Config(format!("unknown occlusion region code {c}"))),
        })
    }
}

/// A contiguous block of masked coordinates, given as a fraction of the
/// embedding so the same occluder applies to embeddings of any width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub region: Region,
    /// Block start as a fraction of the embedding width.
    pub start: f64,
    pub rate: f64,
}

impl Occlusion {
    pub const NONE: Occlusion = Occlusion {
        region: Region::None,
        start: 0.0,
        rate: 0.0,
    };

    /// Masked coordinate range for an embedding of width `dim`.
    pub fn block(&self, dim: usize) -> std::ops::Range<usize> {
        if self.region == Region::None {
            return 0..0;
        }
        let len = ((self.rate * dim as f64).floor() as usize).min(dim);
        let start = ((self.start * dim as f64).floor() as usize).min(dim - len);
        start..start + len
    }

    pub fn is_occluded(&self) -> bool {
        self.region != Region::None && self.rate > 0.0
    }
}

/// Frozen linear-plus-normalization stand-in for an image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    pub out_dim: usize,
    pub in_dim: usize,
    /// out×in, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearEncoder {
    fn random(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, coeff_scale: f64) -> Self {
        let w_std = 1.0 / ((in_dim as f64).sqrt() * coeff_scale);
        let weight = (0..out_dim * in_dim).map(|_| w_std * normal(rng)).collect();
        let bias = (0..out_dim).map(|_| BIAS_GAIN * normal(rng)).collect();
        LinearEncoder {
            out_dim,
            in_dim,
            weight,
            bias,
        }
    }

    /// `normalize(W·x + b)`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("encoder input", self.in_dim, x.len())?;
        let mut y: Vec<f64> = self
            .weight
            .chunks(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonFinite("encoder output"));
        }
        y.iter_mut().for_each(|v| *v /= norm);
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub index: usize,
    pub identity: usize,
    pub split: Split,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub clean_ca: Vec<f64>,
    pub clean_cf: Vec<f64>,
    pub ca: Vec<f64>,
    pub cf: Vec<f64>,
    pub occlusion: Occlusion,
}

impl SynthSample {
    /// Identity condition `c_a` (as observed, i.e. corrupted).
    pub fn id_condition(&self) -> &[f64] {
        &self.ca
    }

    /// Joint condition `c_a ∥ c_f` (as observed).
    pub fn joint_condition(&self) -> Vec<f64> {
        [self.ca.as_slice(), self.cf.as_slice()].concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub shape_encoder: LinearEncoder,
    pub expr_encoder: LinearEncoder,
    pub samples: Vec<SynthSample>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

// stream ids: 0 encoders, 1 identities, 2.. per-sample
const ENCODER_STREAM: u64 = 0;
const IDENTITY_STREAM: u64 = 1;
const SAMPLE_STREAM_BASE: u64 = 2;

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, ENCODER_STREAM);
    let shape_encoder = LinearEncoder::random(&mut rng, cfg.ca_dim, cfg.shape_dim, cfg.coeff_scale);
    let expr_encoder = LinearEncoder::random(&mut rng, cfg.cf_dim, cfg.expr_dim, cfg.coeff_scale);

    let mut rng = stream(cfg.seed, IDENTITY_STREAM);
    let betas: Vec<Vec<f64>> = (0..cfg.identities)
        .map(|_| {
            (0..cfg.shape_dim)
                .map(|_| cfg.coeff_scale * normal(&mut rng))
                .collect()
        })
        .collect();
    let clean_cas = betas
        .iter()
        .map(|b| shape_encoder.encode(b))
        .collect::<Result<Vec<_>>>()?;

    let first_val = cfg.identities - cfg.val_identities;
    let mut samples = Vec::with_capacity(cfg.sample_count());
    for index in 0..cfg.sample_count() {
        let identity = index / cfg.expressions_per_identity;
        let mut rng = stream(cfg.seed, SAMPLE_STREAM_BASE + index as u64);
        let psi: Vec<f64> = (0..cfg.expr_dim)
            .map(|_| cfg.coeff_scale * normal(&mut rng))
            .collect();
        let clean_cf = expr_encoder.encode(&psi)?;
        let occlusion = draw_occlusion(&mut rng, cfg);
        let clean_ca = clean_cas[identity].clone();
        let ca = corrupt(&clean_ca, &occlusion, cfg.noise_sigma, &mut rng);
        let cf = corrupt(&clean_cf, &occlusion, cfg.noise_sigma, &mut rng);
        samples.push(SynthSample {
            index,
            identity,
            split: if identity >= first_val {
                Split::Val
            } else {
                Split::Train
            },
            beta: betas[identity].clone(),
            psi,
            clean_ca,
            clean_cf,
            ca,
            cf,
            occlusion,
        });
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        shape_encoder,
        expr_encoder,
        samples,
    })
}

fn draw_occlusion(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Occlusion {
    // both draws happen unconditionally so streams stay aligned across configs
    let occluded = rng.random::<f64>() < cfg.occluded_fraction;
    let pick: f64 = rng.random();
    let offset: f64 = rng.random();
    if !occluded || cfg.occlusion_rate == 0.0 {
        return Occlusion::NONE;
    }
    let (region, start) = match (pick * 3.0) as usize {
        0 => (Region::Eyes, 0.0),
        1 => (Region::Mouth, 1.0 - cfg.occlusion_rate),
        _ => (Region::Random, offset * (1.0 - cfg.occlusion_rate)),
    };
    Occlusion {
        region,
        start,
        rate: cfg.occlusion_rate,
    }
}

/// Zeroes the occluded block, then adds `N(0, σ²)` to every coordinate.
pub fn corrupt(clean: &[f64], occlusion: &Occlusion, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let block = occlusion.block(clean.len());
    clean
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let base = if block.contains(&i) { 0.0 } else { v };
            let z = normal(rng);
            if sigma == 0.0 {
                base
            } else {
                base + sigma * z
            }
        })
        .collect()
}

/// Full ground-truth mesh at zero pose and its frontal vertices.
pub fn make_gt_mesh(
    assets: &ModelAssets,
    beta: &[f64],
    psi: &[f64],
) -> Result<(crate::head::Mesh, Vec<Vec3>)> {
    let mesh = assets.reconstruct(
        &CoefficientVector::shape(beta.to_vec())?,
        &CoefficientVector::zeros(crate::head::CoeffKind::Pose, assets.pose_dim()),
        &CoefficientVector::expression(psi.to_vec())?,
    )?;
    let frontal = assets.extract_frontal(&mesh)?;
    Ok((mesh, frontal))
}

/// Neutral-expression frontal vertices, the ranking ground truth `x_sgf`.
pub fn neutral_frontal(assets: &ModelAssets, beta: &[f64]) -> Result<Vec<Vec3>> {
    assets.frontal_neutral(beta)
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_container(&self) -> Result<Container> {
        let cfg = &self.config;
        let n = self.samples.len();
        let mut c = Container::new(serde_json::json!({ "config": cfg }));
        let cat = |f: &dyn Fn(&SynthSample) -> &[f64]| -> Vec<f64> {
            self.samples
                .iter()
                .flat_map(|s| f(s).iter().copied())
                .collect()
        };
        c.push(
            "shape_encoder.weight",
            vec![cfg.ca_dim, cfg.shape_dim],
            BlobData::F64(self.shape_encoder.weight.clone()),
        );
        c.push(
            "shape_encoder.bias",
            vec![cfg.ca_dim],
            BlobData::F64(self.shape_encoder.bias.clone()),
        );
        c.push(
            "expr_encoder.weight",
            vec![cfg.cf_dim, cfg.expr_dim],
            BlobData::F64(self.expr_encoder.weight.clone()),
        );
        c.push(
            "expr_encoder.bias",
            vec![cfg.cf_dim],
            BlobData::F64(self.expr_encoder.bias.clone()),
        );
        c.push(
            "beta",
            vec![n, cfg.shape_dim],
            BlobData::F64(cat(&|s| &s.beta)),
        );
        c.push(
            "psi",
            vec![n, cfg.expr_dim],
            BlobData::F64(cat(&|s| &s.psi)),
        );
        c.push(
            "clean_ca",
            vec![n, cfg.ca_dim],
            BlobData::F64(cat(&|s| &s.clean_ca)),
        );
        c.push(
            "clean_cf",
            vec![n, cfg.cf_dim],
            BlobData::F64(cat(&|s| &s.clean_cf)),
        );
        c.push("ca", vec![n, cfg.ca_dim], BlobData::F64(cat(&|s| &s.ca)));
        c.push("cf", vec![n, cfg.cf_dim], BlobData::F64(cat(&|s| &s.cf)));
        c.push(
            "occlusion.region",
            vec![n],
            BlobData::U8(
                self.samples
                    .iter()
                    .map(|s| s.occlusion.region.code())
                    .collect(),
            ),
        );
        c.push(
            "occlusion.start",
            vec![n],
            BlobData::F64(self.samples.iter().map(|s| s.occlusion.start).collect()),
        );
        c.push(
            "occlusion.rate",
            vec![n],
            BlobData::F64(self.samples.iter().map(|s| s.occlusion.rate).collect()),
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: SynthConfig = serde_json::from_value(
            c.extra
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Config("dataset file lacks its config".into()))?,
        )?;
        config.validate()?;
        let f64s = |name: &str, len: usize| -> Result<Vec<f64>> {
            match c.get(name).map(|b| &b.data) {
                Some(BlobData::F64(v)) if v.len() == len => Ok(v.clone()),
                _ => Err(Error::Config(format!(
                    "dataset blob `{name}` missing or malformed"
                ))),
            }
        };
        let n = config.sample_count();
        let (sd, ed, ad, fd) = (
            config.shape_dim,
            config.expr_dim,
            config.ca_dim,
            config.cf_dim,
        );
        let beta = f64s("beta", n * sd)?;
        let psi = f64s("psi", n * ed)?;
        let clean_ca = f64s("clean_ca", n * ad)?;
        let clean_cf = f64s("clean_cf", n * fd)?;
        let ca = f64s("ca", n * ad)?;
        let cf = f64s("cf", n * fd)?;
        let starts = f64s("occlusion.start", n)?;
        let rates = f64s("occlusion.rate", n)?;
        let regions = match c.get("occlusion.region").map(|b| &b.data) {
            Some(BlobData::U8(v)) if v.len() == n => v.clone(),
            _ => {
                return Err(Error::Config(
                    "dataset blob `occlusion.region` missing or malformed".into(),
                ))
            }
        };
        let first_val = config.identities - config.val_identities;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let identity = i / config.expressions_per_identity;
            samples.push(SynthSample {
                index: i,
                identity,
                split: if identity >= first_val {
                    Split::Val
                } else {
                    Split::Train
                },
                beta: beta[i * sd..(i + 1) * sd].to_vec(),
                psi: psi[i * ed..(i + 1) * ed].to_vec(),
                clean_ca: clean_ca[i * ad..(i + 1) * ad].to_vec(),
                clean_cf: clean_cf[i * fd..(i + 1) * fd].to_vec(),
                ca: ca[i * ad..(i + 1) * ad].to_vec(),
                cf: cf[i * fd..(i + 1) * fd].to_vec(),
                occlusion: Occlusion {
                    region: Region::from_code(regions[i])?,
                    start: starts[i],
                    rate: rates[i],
                },
            });
        }
        let encoder = |prefix: &str, out_dim: usize, in_dim: usize| -> Result<LinearEncoder> {
            Ok(LinearEncoder {
                out_dim,
                in_dim,
                weight: f64s(&format!("{prefix}.weight"), out_dim * in_dim)?,
                bias: f64s(&format!("{prefix}.bias"), out_dim)?,
            })
        };
        Ok(SynthDataset {
            shape_encoder: encoder("shape_encoder", ad, sd)?,
            expr_encoder: encoder("expr_encoder", fd, ed)?,
            config,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write_file(DATASET_MAGIC, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_file(DATASET_MAGIC, path)?)
    }

    /// JSON index describing the dataset file and its splits.
    pub fn manifest(&self, blob_file: &str) -> serde_json::Value {
        let count = |split| self.split(split).count();
        let occluded = self
            .samples
            .iter()
            .filter(|s| s.occlusion.is_occluded())
            .count();
        serde_json::json!({
            "format": "occface-dataset",
            "data_file": blob_file,
            "config": self.config,
            "samples": self.samples.len(),
            "splits": {
                "train": { "samples": count(Split::Train), "identities": self.config.identities - self.config.val_identities },
                "val": { "samples": count(Split::Val), "identities": self.config.val_identities },
            },
            "occluded_samples": occluded,
        })
    }
}
