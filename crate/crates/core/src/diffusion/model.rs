use std::path::Path;

use gradcore::{AdamState, Graph, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{sinusoidal_embed, NoiseSchedule, ScheduleConfig};
use super::unet::{AdapterMode, UNetConfig};
use crate::error::{ensure_dim, Error, Result};

/// Noise predictor `ε̂(x_t, t, c)` over row-major batches.
pub trait Denoiser: Sync {
    fn coeff_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn predict(&self, x_t: &[f64], t: &[usize], cond: &[f64]) -> Result<Vec<f64>>;
}

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDenoiser {
    pub coeff_dim: usize,
    pub cond_dim: usize,
}

impl Denoiser for ZeroDenoiser {
    fn coeff_dim(&self) -> usize {
        self.coeff_dim
    }
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
    fn predict(&self, x_t: &[f64], _t: &[usize], _cond: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x_t.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
}

impl DiffusionConfig {
    /// Shape generator: 300 coefficients conditioned on a 512-d embedding.
    pub fn idgen() -> Self {
        DiffusionConfig {
            unet: UNetConfig {
                coeff_dim: 300,
                cond_dim: 512,
                channels: 4,
                cond_channels: 4,
                widths: vec![32, 64, 128],
                heads: 4,
                time_dim: 128,
                embed_dim: 128,
                adapter: AdapterMode::Trainable,
            },
            schedule: ScheduleConfig::linear(1000),
        }
    }

    /// Expression generator: 50 coefficients conditioned on a 1024-d embedding.
    pub fn expgen() -> Self {
        DiffusionConfig {
            unet: UNetConfig {
                coeff_dim: 50,
                cond_dim: 1024,
                channels: 2,
                cond_channels: 2,
                adapter: AdapterMode::Frozen,
                ..Self::idgen().unet
            },
            schedule: ScheduleConfig::linear(1000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        Ok(())
    }
}

/// Noise schedule plus trained denoiser for one coefficient space.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore<f32>,
}

/// Conditions are unit-norm embeddings; scaling by `√dim` gives entries of
/// order one before they enter the network.
fn cond_gain(dim: usize) -> f64 {
    (dim as f64).sqrt()
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        let params = config.unet.init_params(seed)?;
        Ok(DiffusionModel {
            config,
            schedule,
            params,
        })
    }

    fn inputs(
        &self,
        g: &mut Graph<f32>,
        x_t: &[f64],
        t: &[usize],
        cond: &[f64],
    ) -> Result<[gradcore::Var; 3]> {
        let u = &self.config.unet;
        let batch = t.len();
        ensure_dim("noised batch", batch * u.coeff_dim, x_t.len())?;
        ensure_dim("condition batch", batch * u.cond_dim, cond.len())?;
        let mut temb = Vec::with_capacity(batch * u.time_dim);
        for &ti in t {
            temb.extend(sinusoidal_embed(ti as f64, u.time_dim)?);
        }
        let gain = cond_gain(u.cond_dim);
        let scaled: Vec<f64> = cond.iter().map(|c| c * gain).collect();
        let x = g.constant(Tensor::from_f64(vec![batch, u.coeff_dim], x_t)?)?;
        let te = g.constant(Tensor::from_f64(vec![batch, u.time_dim], &temb)?)?;
        let c = g.constant(Tensor::from_f64(vec![batch, u.cond_dim], &scaled)?)?;
        Ok([x, te, c])
    }

    /// One Adam step on the L1 noise-prediction loss; returns the loss.
    ///
    /// `t ~ U{1..T}` and `ε ~ N(0, I)` are drawn per item from `rng`. On a
    /// non-finite value the step is abandoned and parameters are untouched.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState<f32>,
        x0: &[f64],
        cond: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let d = self.config.unet.coeff_dim;
        if x0.is_empty() || !x0.len().is_multiple_of(d) {
            return Err(Error::Empty("training batch"));
        }
        let batch = x0.len() / d;
        let steps = self.schedule.steps();
        let mut t = Vec::with_capacity(batch);
        let mut eps = Vec::with_capacity(x0.len());
        let mut x_t = Vec::with_capacity(x0.len());
        for row in x0.chunks(d) {
            let ti = rng.random_range(1..=steps);
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            x_t.extend(self.schedule.forward_diffuse(row, ti, &e)?);
            t.push(ti);
            eps.extend(e);
        }
        // drop anything left behind by an abandoned step
        self.params.zero_grads();
        let mut g = Graph::new();
        let [x, te, c] = self.inputs(&mut g, &x_t, &t, cond)?;
        let pred = self
            .config
            .unet
            .forward(&mut g, &self.params, x, te, c, true)?;
        let target = Tensor::from_f64(vec![batch, d], &eps)?;
        let loss = g.mean_abs_error(pred, target)?;
        let value = g.value(loss).data()[0] as f64;
        g.backward(loss, &mut self.params)?;
        adam.step(&mut self.params)?;
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, serde_json::Value::Null)
    }

    /// Saves with caller metadata (seed, data provenance) embedded in the header.
    pub fn save_with_meta(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let extra = serde_json::json!({ "kind": "diffusion", "config": self.config, "meta": meta });
        self.params.save(path, extra)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, extra) = ParamStore::<f32>::load(path)?;
        if extra.get("kind").and_then(|k| k.as_str()) != Some("diffusion") {
            return Err(Error::Config(format!(
                "{} is not a diffusion checkpoint",
                path.display()
            )));
        }
        let config: DiffusionConfig = serde_json::from_value(extra["config"].clone())?;
        config.validate()?;
        let expected = config.unet.init_params::<f32>(0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Config(format!(
                        "checkpoint parameter `{name}` missing or misshaped"
                    )))
                }
            }
        }
        let schedule = NoiseSchedule::new(&config.schedule)?;
        Ok(DiffusionModel {
            config,
            schedule,
            params,
        })
    }
}

impl Denoiser for DiffusionModel {
    fn coeff_dim(&self) -> usize {
        self.config.unet.coeff_dim
    }

    fn cond_dim(&self) -> usize {
        self.config.unet.cond_dim
    }

    fn predict(&self, x_t: &[f64], t: &[usize], cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let [x, te, c] = self.inputs(&mut g, x_t, t, cond)?;
        let out = self
            .config
            .unet
            .forward(&mut g, &self.params, x, te, c, false)?;
        Ok(g.value(out).to_f64())
    }
}

/// L1 noise-prediction loss of any denoiser, without gradients.
pub fn epsilon_loss(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x0: &[f64],
    cond: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = den.coeff_dim();
    if x0.is_empty() || !x0.len().is_multiple_of(d) {
        return Err(Error::Empty("loss batch"));
    }
    let mut t = Vec::new();
    let mut eps = Vec::with_capacity(x0.len());
    let mut x_t = Vec::with_capacity(x0.len());
    for row in x0.chunks(d) {
        let ti = rng.random_range(1..=schedule.steps());
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        x_t.extend(schedule.forward_diffuse(row, ti, &e)?);
        t.push(ti);
        eps.extend(e);
    }
    let pred = den.predict(&x_t, &t, cond)?;
    let loss = pred
        .iter()
        .zip(&eps)
        .map(|(p, e)| (p - e).abs())
        .sum::<f64>()
        / eps.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("noise-prediction loss"));
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            lr: 1e-4,
        }
    }
}

/// Supervised pairs `(x0, condition)` held as flat rows.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub x0: Vec<Vec<f64>>,
    pub cond: Vec<Vec<f64>>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn push(&mut self, x0: Vec<f64>, cond: Vec<f64>) {
        self.x0.push(x0);
        self.cond.push(cond);
    }
}

/// Trains for `cfg.steps` Adam steps on minibatches drawn with replacement.
/// Returns the per-step losses.
pub fn train(
    model: &mut DiffusionModel,
    data: &TrainSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Empty("training set"));
    }
    let (d, c) = (model.coeff_dim(), model.cond_dim());
    for (x, k) in data.x0.iter().zip(&data.cond) {
        ensure_dim("training target", d, x.len())?;
        ensure_dim("training condition", c, k.len())?;
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut x0 = Vec::with_capacity(cfg.batch * d);
    let mut cond = Vec::with_capacity(cfg.batch * c);
    for step in 0..cfg.steps {
        x0.clear();
        cond.clear();
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..data.len());
            x0.extend_from_slice(&data.x0[i]);
            cond.extend_from_slice(&data.cond[i]);
        }
        let loss = model.train_step(&mut adam, &x0, &cond, rng)?;
        on_step(step + 1, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// `step,loss` CSV lines.
pub fn metrics_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}
