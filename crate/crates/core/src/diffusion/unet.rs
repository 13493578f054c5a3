//! 1-D U-Net denoiser over a coefficient vector viewed as channels×length.

use gradcore::{Graph, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    /// Identity-initialized linear layer on the condition, trained with the net.
    Trainable,
    /// The condition passes through unchanged.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub coeff_dim: usize,
    pub cond_dim: usize,
    /// Input channels; `coeff_dim / channels` is the sequence length.
    pub channels: usize,
    /// Channels of the condition map concatenated to the input.
    pub cond_channels: usize,
    /// Channel width per resolution level.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub time_dim: usize,
    /// Width of the shared (condition ∥ time) embedding.
    pub embed_dim: usize,
    pub adapter: AdapterMode,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.coeff_dim == 0 || self.cond_dim == 0 || self.channels == 0 {
            return bad("coefficient, condition and channel counts must be positive".into());
        }
        if !self.coeff_dim.is_multiple_of(self.channels) {
            return bad(format!(
                "coefficient dim {} is not divisible by {} channels",
                self.coeff_dim, self.channels
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("need at least one positive level width".into());
        }
        let bottom = *self.widths.last().unwrap();
        if self.heads == 0 || !bottom.is_multiple_of(self.heads) {
            return bad(format!(
                "bottleneck width {bottom} is not divisible by {} heads",
                self.heads
            ));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) || self.embed_dim == 0 {
            return bad("time embedding width must be even and embed width positive".into());
        }
        Ok(())
    }

    pub fn length(&self) -> usize {
        self.coeff_dim / self.channels
    }

    fn level_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.length()];
        for _ in 1..self.widths.len() {
            let l = *lens.last().unwrap();
            lens.push(l.div_ceil(2));
        }
        lens
    }

    /// Parameter names and shapes in creation order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<_>, name: &str, i: usize, o: usize, init: Init| {
            out.push((format!("{name}.w"), vec![i, o], init));
            out.push((format!("{name}.b"), vec![o], Init::Zero));
        };
        if self.adapter == AdapterMode::Trainable {
            lin(
                &mut out,
                "adapter",
                self.cond_dim,
                self.cond_dim,
                Init::Identity,
            );
        }
        lin(
            &mut out,
            "embed",
            self.cond_dim + self.time_dim,
            self.embed_dim,
            Init::Uniform(self.cond_dim + self.time_dim),
        );
        if self.cond_channels > 0 {
            lin(
                &mut out,
                "cond_map",
                self.embed_dim,
                self.cond_channels * self.length(),
                Init::Uniform(self.embed_dim),
            );
        }
        let conv = |out: &mut Vec<_>, name: &str, cin: usize, cout: usize, k: usize, init: Init| {
            out.push((format!("{name}.w"), vec![cout, cin, k], init));
            out.push((format!("{name}.b"), vec![cout], Init::Zero));
        };
        let w = &self.widths;
        conv(
            &mut out,
            "in",
            self.channels + self.cond_channels,
            w[0],
            3,
            Init::Uniform(3 * (self.channels + self.cond_channels)),
        );
        let block = |out: &mut Vec<_>, name: &str, cin: usize, cout: usize| {
            conv(
                out,
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                Init::Uniform(3 * cin),
            );
            out.push((
                format!("{name}.emb.w"),
                vec![self.embed_dim, cout],
                Init::Uniform(self.embed_dim),
            ));
            out.push((format!("{name}.emb.b"), vec![cout], Init::Zero));
            conv(
                out,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                Init::Uniform(3 * cout),
            );
            if cin != cout {
                conv(
                    out,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    1,
                    Init::Uniform(cin),
                );
            }
        };
        for (i, &wi) in w.iter().enumerate() {
            block(&mut out, &format!("enc{i}"), wi, wi);
            if i + 1 < w.len() {
                conv(
                    &mut out,
                    &format!("down{i}"),
                    wi,
                    w[i + 1],
                    3,
                    Init::Uniform(3 * wi),
                );
            }
        }
        let bottom = *w.last().unwrap();
        out.push(("mid.ln.g".into(), vec![bottom], Init::One));
        out.push(("mid.ln.b".into(), vec![bottom], Init::Zero));
        lin(
            &mut out,
            "mid.qkv",
            bottom,
            3 * bottom,
            Init::Uniform(bottom),
        );
        lin(&mut out, "mid.proj", bottom, bottom, Init::Uniform(bottom));
        for i in (0..w.len() - 1).rev() {
            block(&mut out, &format!("dec{i}"), w[i + 1] + w[i], w[i]);
        }
        conv(&mut out, "out", w[0], self.channels, 3, Init::Zero);
        out
    }

    /// Fresh parameters; the output layer starts at zero so the untrained
    /// net predicts zero noise.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in self.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Identity => (0..n)
                    .map(|i| {
                        if i / shape[1] == i % shape[1] {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            store.insert(name, Tensor::<f64>::from_f64(shape, &data)?.cast())?;
        }
        Ok(store)
    }

    /// Predicted noise `[B, coeff_dim]` for noised input `x` `[B, coeff_dim]`,
    /// time embedding `temb` `[B, time_dim]` and condition `cond` `[B, cond_dim]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        temb: Var,
        cond: Var,
        trainable: bool,
    ) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut net = Net {
            g,
            store,
            trainable,
        };
        let c = match self.adapter {
            AdapterMode::Trainable => net.linear("adapter", cond)?,
            AdapterMode::Frozen => cond,
        };
        let joint = net.g.concat(c, temb, 1)?;
        let e = net.linear("embed", joint)?;
        let emb = net.g.silu(e)?;

        let len = self.length();
        let mut h = net.g.reshape(x, &[batch, self.channels, len])?;
        if self.cond_channels > 0 {
            let m = net.linear("cond_map", emb)?;
            let m = net.g.reshape(m, &[batch, self.cond_channels, len])?;
            h = net.g.concat(h, m, 1)?;
        }
        h = net.conv("in", h, 1, 1)?;

        let lens = self.level_lengths();
        let levels = self.widths.len();
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = net.res_block(&format!("enc{i}"), h, emb)?;
            if i + 1 < levels {
                skips.push(h);
                h = net.conv(&format!("down{i}"), h, 2, 1)?;
            }
        }
        h = net.attention(h, self.heads)?;
        for i in (0..levels - 1).rev() {
            let up = net.g.upsample_nearest(h, lens[i])?;
            let cat = net.g.concat(up, skips[i], 1)?;
            h = net.res_block(&format!("dec{i}"), cat, emb)?;
        }
        let h = net.g.silu(h)?;
        let out = net.conv("out", h, 1, 1)?;
        Ok(net.g.reshape(out, &[batch, self.coeff_dim])?)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    One,
    Identity,
    Uniform(usize),
}

struct Net<'a, T: Real> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
}

impl<T: Real> Net<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        Ok(if self.trainable {
            self.g.param(self.store, name)?
        } else {
            self.g.frozen(self.store, name)?
        })
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        Ok(self.g.linear(x, w, Some(b))?)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        Ok(self.g.conv1d(x, w, b, stride, pad)?)
    }

    /// `conv2(silu(conv1(silu(h)) + proj(emb))) + skip(h)`.
    fn res_block(&mut self, name: &str, h: Var, emb: Var) -> Result<Var> {
        let a = self.g.silu(h)?;
        let a = self.conv(&format!("{name}.conv1"), a, 1, 1)?;
        let bias = self.linear(&format!("{name}.emb"), emb)?;
        let a = self.g.add_bias_last(a, bias)?;
        let a = self.g.silu(a)?;
        let a = self.conv(&format!("{name}.conv2"), a, 1, 1)?;
        // blocks that change width carry a 1×1 projection on the skip path
        let skip = if self.store.contains(&format!("{name}.skip.w")) {
            self.conv(&format!("{name}.skip"), h, 1, 0)?
        } else {
            h
        };
        Ok(self.g.add(a, skip)?)
    }

    /// Pre-norm residual self-attention over positions.
    fn attention(&mut self, h: Var, heads: usize) -> Result<Var> {
        let seq = self.g.swap_last2(h)?;
        let gain = self.p("mid.ln.g")?;
        let bias = self.p("mid.ln.b")?;
        let n = self.g.layer_norm(seq, gain, bias, 1e-5)?;
        let qkv = self.linear("mid.qkv", n)?;
        let a = self.g.attention(qkv, heads)?;
        let o = self.linear("mid.proj", a)?;
        let seq = self.g.add(seq, o)?;
        Ok(self.g.swap_last2(seq)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(adapter: AdapterMode) -> UNetConfig {
        UNetConfig {
            coeff_dim: 12,
            cond_dim: 5,
            channels: 2,
            cond_channels: 1,
            widths: vec![4, 6, 8],
            heads: 2,
            time_dim: 4,
            embed_dim: 6,
            adapter,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        for adapter in [AdapterMode::Trainable, AdapterMode::Frozen] {
            let cfg = tiny(adapter);
            let store = cfg.init_params::<f64>(3).unwrap();
            assert_eq!(
                store.contains("adapter.w"),
                adapter == AdapterMode::Trainable
            );
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[3, 12], 0.5)).unwrap();
            let t = g.constant(Tensor::full(&[3, 4], 0.1)).unwrap();
            let c = g.constant(Tensor::full(&[3, 5], -0.2)).unwrap();
            let y = cfg.forward(&mut g, &store, x, t, c, false).unwrap();
            assert_eq!(g.shape(y), &[3, 12]);
            // zero-initialized output layer
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_lengths_survive_down_and_up_sampling() {
        let cfg = UNetConfig {
            coeff_dim: 2,
            channels: 1,
            ..tiny(AdapterMode::Frozen)
        };
        let store = cfg.init_params::<f64>(0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let t = g.constant(Tensor::full(&[1, 4], 0.0)).unwrap();
        let c = g.constant(Tensor::full(&[1, 5], 1.0)).unwrap();
        let y = cfg.forward(&mut g, &store, x, t, c, true).unwrap();
        assert_eq!(g.shape(y), &[1, 2]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(AdapterMode::Frozen);
        c.coeff_dim = 13;
        assert!(c.validate().is_err());
        let mut c = tiny(AdapterMode::Frozen);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(AdapterMode::Frozen);
        c.widths.clear();
        assert!(c.validate().is_err());
    }
}
