use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthConfig;
use crate::diffusion::{AdapterMode, DiffusionConfig, ScheduleConfig, TrainConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::eval::AlignmentMode;
use crate::head::HeadConfig;
use crate::rank::Temperature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Dimensions of the full-size model: 300 shape and 50 expression
    /// coefficients, 512-d embeddings, 1000 diffusion steps.
    Full,
    /// Reduced dimensions that train and sample in minutes on one CPU core.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub model: DiffusionConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSettings {
    pub hidden: Vec<usize>,
    pub feature_scale: f64,
    pub temperature: Temperature,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Candidates per training list.
    pub pool_size: usize,
    /// Distinct training inputs drawn for ranking lists.
    pub lists: usize,
    /// Candidate pools are regenerated every this many steps.
    pub resample_period: usize,
    /// Share of training lists whose second half is replaced by prior draws.
    pub mixed_fraction: f64,
    /// Reverse steps used when sampling training candidates.
    pub sample_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Shape hypotheses per input.
    pub n_samples: usize,
    /// Expression hypotheses per input; defaults to `n_samples`.
    pub n_expressions: Option<usize>,
    /// Reverse steps; defaults to the full schedule.
    pub step_count: Option<usize>,
    /// Reconstruct only the first this many validation inputs.
    pub max_inputs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub alignment: AlignmentMode,
    /// Align on the model landmarks rather than every visible vertex.
    pub landmarks_only: bool,
    /// Candidates per input in the mixed prior/model pools.
    pub mixed_pool: usize,
}

/// Overrides for artifact locations; unset paths resolve inside the output
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub assets: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub idgen: Option<PathBuf>,
    pub expgen: Option<PathBuf>,
    pub idrank: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub head: HeadConfig,
    pub data: SynthConfig,
    pub idgen: NetConfig,
    pub expgen: NetConfig,
    pub idrank: RankSettings,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => full(),
            Preset::Desk => desk(),
        }
    }

    /// Parses a possibly partial JSON document. Missing fields, at any
    /// depth, take the value of the chosen `preset` (default `full`).
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let preset = match user.get("preset") {
            None => Preset::Full,
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut base = serde_json::to_value(RunConfig::preset(preset))?;
        merge(&mut base, user);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        self.idgen.model.validate()?;
        self.expgen.model.validate()?;
        let checks = [
            (
                "head.shape_dim vs data.shape_dim",
                self.head.shape_dim,
                self.data.shape_dim,
            ),
            (
                "head.expr_dim vs data.expr_dim",
                self.head.expr_dim,
                self.data.expr_dim,
            ),
            (
                "idgen coeff_dim vs data.shape_dim",
                self.idgen.model.unet.coeff_dim,
                self.data.shape_dim,
            ),
            (
                "idgen cond_dim vs data.ca_dim",
                self.idgen.model.unet.cond_dim,
                self.data.ca_dim,
            ),
            (
                "expgen coeff_dim vs data.expr_dim",
                self.expgen.model.unet.coeff_dim,
                self.data.expr_dim,
            ),
            (
                "expgen cond_dim vs data joint condition",
                self.expgen.model.unet.cond_dim,
                self.data.joint_cond_dim(),
            ),
        ];
        for (what, a, b) in checks {
            if a != b {
                return bad(format!("{what}: {a} != {b}"));
            }
        }
        for (what, t) in [("idgen", &self.idgen.train), ("expgen", &self.expgen.train)] {
            if t.batch == 0 || !(t.lr > 0.0 && t.lr.is_finite()) {
                return bad(format!(
                    "{what}.train needs a positive batch and learning rate"
                ));
            }
        }
        let r = &self.idrank;
        if r.hidden.is_empty()
            || r.hidden.contains(&0)
            || r.batch == 0
            || r.pool_size < 2
            || r.lists == 0
        {
            return bad("idrank needs hidden widths, a positive batch and list count, and pools of at least 2".into());
        }
        if r.resample_period == 0
            || !(r.lr > 0.0 && r.lr.is_finite())
            || !(0.0..=1.0).contains(&r.mixed_fraction)
        {
            return bad("idrank needs a positive resample period and learning rate, and mixed_fraction in [0, 1]".into());
        }
        if self.sampling.n_samples == 0 || self.sampling.n_expressions == Some(0) {
            return bad("sample counts must be positive".into());
        }
        if self.eval.mixed_pool < 2 {
            return bad("eval.mixed_pool must be at least 2".into());
        }
        for steps in [self.sampling.step_count, r.sample_steps]
            .into_iter()
            .flatten()
        {
            if steps == 0
                || steps
                    > self
                        .idgen
                        .model
                        .schedule
                        .steps
                        .min(self.expgen.model.schedule.steps)
            {
                return bad(format!("step count {steps} is outside 1..=T"));
            }
        }
        Ok(())
    }

    pub fn n_expressions(&self) -> usize {
        self.sampling
            .n_expressions
            .unwrap_or(self.sampling.n_samples)
    }
}

/// Recursively overlays `user` onto `base`; objects merge key by key, any
/// other value replaces. Unknown keys survive so validation can reject them.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

fn full() -> RunConfig {
    RunConfig {
        preset: Preset::Full,
        seed: 0,
        head: HeadConfig::default(),
        data: SynthConfig::default(),
        idgen: NetConfig {
            model: DiffusionConfig::idgen(),
            train: TrainConfig::default(),
        },
        expgen: NetConfig {
            model: DiffusionConfig::expgen(),
            train: TrainConfig::default(),
        },
        idrank: RankSettings {
            hidden: vec![512, 256, 64],
            feature_scale: 1000.0,
            temperature: Temperature::Median,
            steps: 2000,
            batch: 8,
            lr: 1e-4,
            pool_size: 100,
            lists: 1024,
            resample_period: 1,
            mixed_fraction: 0.0,
            sample_steps: None,
        },
        sampling: SamplingConfig {
            n_samples: 100,
            n_expressions: None,
            step_count: None,
            max_inputs: None,
        },
        eval: EvalConfig {
            alignment: AlignmentMode::NonMetrical,
            landmarks_only: false,
            mixed_pool: 100,
        },
        paths: Paths::default(),
    }
}

fn desk() -> RunConfig {
    let unet = |coeff_dim, cond_dim, adapter| UNetConfig {
        coeff_dim,
        cond_dim,
        channels: 1,
        cond_channels: 1,
        widths: vec![16, 32, 64],
        heads: 4,
        time_dim: 32,
        embed_dim: 64,
        adapter,
    };
    let train = TrainConfig {
        steps: 1500,
        batch: 64,
        lr: 2e-3,
    };
    RunConfig {
        preset: Preset::Desk,
        seed: 0,
        head: HeadConfig {
            vertices: 500,
            shape_dim: 24,
            expr_dim: 8,
            ..HeadConfig::default()
        },
        data: SynthConfig {
            identities: 425,
            expressions_per_identity: 4,
            shape_dim: 24,
            expr_dim: 8,
            ca_dim: 48,
            cf_dim: 16,
            val_identities: 25,
            ..SynthConfig::default()
        },
        idgen: NetConfig {
            model: DiffusionConfig {
                unet: unet(24, 48, AdapterMode::Trainable),
                schedule: ScheduleConfig::linear(100),
            },
            train: train.clone(),
        },
        expgen: NetConfig {
            model: DiffusionConfig {
                unet: unet(8, 64, AdapterMode::Frozen),
                schedule: ScheduleConfig::linear(100),
            },
            train,
        },
        idrank: RankSettings {
            hidden: vec![64, 32, 16],
            feature_scale: 1000.0,
            temperature: Temperature::Median,
            steps: 600,
            batch: 16,
            lr: 1e-3,
            pool_size: 16,
            lists: 256,
            resample_period: 1_000_000,
            mixed_fraction: 0.5,
            sample_steps: Some(50),
        },
        sampling: SamplingConfig {
            n_samples: 100,
            n_expressions: None,
            step_count: Some(50),
            max_inputs: None,
        },
        eval: EvalConfig {
            alignment: AlignmentMode::NonMetrical,
            landmarks_only: false,
            mixed_pool: 100,
        },
        paths: Paths::default(),
    }
}
