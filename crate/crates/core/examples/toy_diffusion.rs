//! Trains a conditional diffusion model on a two-mode toy problem and
//! reports how many samples land on the mode their condition asks for.
//!
//! `cargo run --release --example toy_diffusion -- [steps]`

use occface::diffusion::{
    sample_batch, train, AdapterMode, DiffusionConfig, DiffusionModel, ScheduleConfig, TrainConfig,
    TrainSet, UNetConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [[f64; 2]; 2] = [[-1.0, 1.0], [1.0, -1.0]];

fn main() -> occface::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1500);
    let config = DiffusionConfig {
        unet: UNetConfig {
            coeff_dim: 2,
            cond_dim: 2,
            channels: 1,
            cond_channels: 1,
            widths: vec![16, 32, 32],
            heads: 4,
            time_dim: 16,
            embed_dim: 32,
            adapter: AdapterMode::Frozen,
        },
        schedule: ScheduleConfig::linear(100),
    };
    let mut model = DiffusionModel::new(config, 0)?;
    let mut data = TrainSet::default();
    for (c, mode) in MODES.iter().enumerate() {
        let mut cond = vec![0.0; 2];
        cond[c] = 1.0;
        data.push(mode.to_vec(), cond);
    }
    let start = std::time::Instant::now();
    let cfg = TrainConfig {
        steps,
        batch: 128,
        lr: 2e-3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let losses = train(&mut model, &data, &cfg, &mut rng, |step, loss| {
        if step % 250 == 0 {
            println!("step {step:5}  loss {loss:.4}");
        }
    })?;
    println!("trained {} steps in {:.1?}", losses.len(), start.elapsed());

    for (c, mode) in MODES.iter().enumerate() {
        let cond = &data.cond[c];
        let t0 = std::time::Instant::now();
        let samples = sample_batch(
            &model,
            &model.schedule,
            cond,
            500,
            100 + c as u64,
            model.schedule.steps(),
        )?;
        let hits = samples
            .iter()
            .filter(|s| ((s[0] - mode[0]).powi(2) + (s[1] - mode[1]).powi(2)).sqrt() < 0.3)
            .count();
        println!(
            "condition {c}: {hits}/500 samples within 0.3 of {mode:?} (sampled in {:.1?})",
            t0.elapsed()
        );
    }
    Ok(())
}
