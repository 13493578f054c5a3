//! Ancestral sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{ensure_dim, Error, Result};

/// Rows pushed through the denoiser at once.
const MAX_ROWS: usize = 512;

/// One chain to run: its condition and its private random stream.
#[derive(Clone, Copy, Debug)]
pub struct Chain<'a> {
    pub cond: &'a [f64],
    pub seed: u64,
    pub stream: u64,
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs independent chains from `x_T ~ N(0, I)` down to `x̂_0`.
///
/// Every chain draws only from its own `(seed, stream)` generator, so a
/// chain's result does not depend on which other chains share its batch.
/// With fewer steps than `T`, the visited timesteps are evenly respaced and
/// the per-step variances are recomputed from `ᾱ`.
pub fn sample_chains(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    chains: &[Chain<'_>],
    step_count: usize,
) -> Result<Vec<Vec<f64>>> {
    let ts = schedule.respaced(step_count)?;
    let mut out = Vec::with_capacity(chains.len());
    for group in chains.chunks(MAX_ROWS) {
        out.extend(run_group(den, schedule, group, &ts)?);
    }
    Ok(out)
}

fn run_group(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    chains: &[Chain<'_>],
    ts: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let d = den.coeff_dim();
    let n = chains.len();
    let mut cond = Vec::with_capacity(n * den.cond_dim());
    for ch in chains {
        ensure_dim("condition", den.cond_dim(), ch.cond.len())?;
        cond.extend_from_slice(ch.cond);
    }
    let mut rngs: Vec<ChaCha8Rng> = chains.iter().map(|c| chain_rng(c.seed, c.stream)).collect();
    let mut x: Vec<f64> = Vec::with_capacity(n * d);
    for rng in &mut rngs {
        x.extend((0..d).map(|_| -> f64 { StandardNormal.sample(rng) }));
    }
    for (k, &t) in ts.iter().enumerate() {
        let prev = ts.get(k + 1).copied().unwrap_or(0);
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(prev);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let sigma = if prev == 0 {
            0.0
        } else {
            ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt()
        };
        let eps = den.predict(&x, &vec![t; n], &cond)?;
        ensure_dim("denoiser output", x.len(), eps.len())?;
        let coef = beta / (1.0 - ab_t).sqrt();
        let inv = 1.0 / alpha.sqrt();
        for (i, (row, rng)) in x.chunks_mut(d).zip(&mut rngs).enumerate() {
            let e = &eps[i * d..(i + 1) * d];
            for (v, ei) in row.iter_mut().zip(e) {
                *v = inv * (*v - coef * ei);
                if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sigma * z;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampler state"));
        }
    }
    Ok(x.chunks(d).map(<[f64]>::to_vec).collect())
}

/// `n` samples sharing one condition; sample `i` uses stream `i` of `seed`.
pub fn sample_batch(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &[f64],
    n: usize,
    seed: u64,
    step_count: usize,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let chains: Vec<Chain> = (0..n as u64)
        .map(|stream| Chain { cond, seed, stream })
        .collect();
    sample_chains(den, schedule, &chains, step_count)
}

/// A single sample; identical to the first row of [`sample_batch`].
pub fn sample(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &[f64],
    seed: u64,
    step_count: usize,
) -> Result<Vec<f64>> {
    Ok(sample_batch(den, schedule, cond, 1, seed, step_count)?.remove(0))
}
