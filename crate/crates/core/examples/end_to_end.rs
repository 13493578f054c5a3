//! Runs every pipeline stage in-process: synthetic data, the two generators
//! and the ranker, reconstruction, the coefficient-prior baseline and both
//! evaluation protocols.
//!
//! `cargo run --release --example end_to_end -- [config.json] [out_dir]`
//!
//! Without arguments this uses the small `configs/tiny.json` run, which
//! finishes in seconds; `configs/desk.json` takes a few minutes.

use occface::pipeline::{Network, Protocol, RunConfig, Workspace};

fn main() -> occface::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json").into());
    let out = args.next().unwrap_or_else(|| "end-to-end-out".into());
    let ws = Workspace::new(RunConfig::load(config.as_ref())?, out)?;

    let ds = ws.synth_data()?;
    println!("{} synthetic samples", ds.samples.len());
    for net in [Network::IdGen, Network::ExpGen, Network::IdRank] {
        let losses = ws.train(net)?;
        println!(
            "{:<7} first loss {:.4}, last loss {:.4}",
            net.name(),
            losses[0],
            losses[losses.len() - 1]
        );
    }
    let sets = ws.reconstruct(&[], true)?;
    let first = &sets[0];
    println!(
        "{} inputs reconstructed; {} picked hypothesis {} of {}",
        sets.len(),
        first.input,
        first.selected,
        first.shape_candidates.len()
    );
    let (_, mixed) = ws.baseline_flame()?;
    let below = mixed
        .iter()
        .filter(|r| r.ranked_error_mm < r.pool_average_mm)
        .count();
    println!(
        "mixed pools: ranked pick beats the pool average on {below}/{}",
        mixed.len()
    );
    let summary = ws.rank_report(20.0)?;
    println!(
        "precision@20% {:.1}, error ratio {:.3}",
        summary.mean_precision, summary.mean_error_ratio
    );
    for protocol in [Protocol::NowStyle, Protocol::Co545Style] {
        let ev = ws.evaluate(protocol, false)?;
        for m in &ev.methods {
            println!(
                "{:<12} {:<20} median {:.4} mm",
                ev.protocol, m.method, m.all.median
            );
        }
    }
    println!("artifacts in {}", ws.out.display());
    Ok(())
}
