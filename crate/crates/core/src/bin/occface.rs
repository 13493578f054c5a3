use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use occface::pipeline::{exit_code, MeshSource, Network, Protocol, RunConfig, Workspace};

#[derive(Parser)]
#[command(
    name = "occface",
    version,
    about = "Multi-hypothesis face reconstruction under occlusion"
)]
struct Cli {
    /// JSON run configuration; omitted fields take preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all commands.
    #[arg(long, global = true, default_value = "occface-out")]
    out: PathBuf,
    /// Hypotheses per input [default: 100].
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    /// Training steps for `train`; reverse diffusion steps when sampling.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic head assets and the paired embedding dataset.
    SynthData,
    /// Train one network.
    Train { network: NetArg },
    /// Sample, rank and rebuild meshes for validation inputs.
    Reconstruct {
        /// Input ids such as s01700; defaults to the validation split.
        #[arg(long = "input")]
        inputs: Vec<String>,
        /// Keep sidecars only.
        #[arg(long)]
        no_meshes: bool,
    },
    /// Ranking quality of stored reconstructions.
    RankReport {
        #[arg(long, default_value_t = 20.0)]
        k_percent: f64,
    },
    /// Score stored reconstructions.
    Evaluate {
        protocol: ProtocolArg,
        /// Evaluate ground truth against itself.
        #[arg(long)]
        self_check: bool,
    },
    /// Coefficient-prior draws and mixed prior/model pools.
    BaselineFlame,
    /// Write one OBJ mesh.
    ExportMesh {
        #[arg(long, conflicts_with = "coeffs")]
        input: Option<String>,
        /// JSON file with `shape`, `expression` and `pose` arrays.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    Idgen,
    Expgen,
    Idrank,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    #[value(name = "now_style")]
    NowStyle,
    #[value(name = "co545_style")]
    Co545Style,
}

fn configure(cli: &Cli) -> occface::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.n_samples {
        cfg.sampling.n_samples = n;
    }
    if let Some(steps) = cli.steps {
        match &cli.command {
            Command::Train { network } => match network {
                NetArg::Idgen => cfg.idgen.train.steps = steps,
                NetArg::Expgen => cfg.expgen.train.steps = steps,
                NetArg::Idrank => cfg.idrank.steps = steps,
            },
            _ => cfg.sampling.step_count = Some(steps),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> occface::Result<()> {
    let ws = Workspace::new(configure(&cli)?, &cli.out)?;
    match cli.command {
        Command::SynthData => {
            let ds = ws.synth_data()?;
            println!("wrote {} samples to {}", ds.samples.len(), ws.out.display());
        }
        Command::Train { network } => {
            let net = match network {
                NetArg::Idgen => Network::IdGen,
                NetArg::Expgen => Network::ExpGen,
                NetArg::Idrank => Network::IdRank,
            };
            let losses = ws.train(net)?;
            let tail = &losses[losses.len().saturating_sub(50)..];
            let avg = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "{}: {} steps, final loss {avg:.5}",
                net.name(),
                losses.len()
            );
        }
        Command::Reconstruct { inputs, no_meshes } => {
            let sets = ws.reconstruct(&inputs, !no_meshes)?;
            println!("reconstructed {} inputs", sets.len());
        }
        Command::RankReport { k_percent } => {
            let s = ws.rank_report(k_percent)?;
            println!(
                "{} inputs: precision@{}% {:.1}, IOU {:.3}, error ratio {:.3}",
                s.inputs, s.k_percent, s.mean_precision, s.mean_iou, s.mean_error_ratio
            );
        }
        Command::Evaluate {
            protocol,
            self_check,
        } => {
            let protocol = match protocol {
                ProtocolArg::NowStyle => Protocol::NowStyle,
                ProtocolArg::Co545Style => Protocol::Co545Style,
            };
            let ev = ws.evaluate(protocol, self_check)?;
            println!(
                "{:<20} {:>9} {:>9} {:>9}",
                ev.protocol, "median", "mean", "std"
            );
            for m in &ev.methods {
                println!(
                    "{:<20} {:>9.4} {:>9.4} {:>9.4}",
                    m.method, m.all.median, m.all.mean, m.all.std
                );
            }
        }
        Command::BaselineFlame => {
            let (_, rows) = ws.baseline_flame()?;
            let below = rows
                .iter()
                .filter(|r| r.ranked_error_mm < r.pool_average_mm)
                .count();
            println!(
                "mixed pools: ranked below pool average on {below}/{} inputs",
                rows.len()
            );
        }
        Command::ExportMesh {
            input,
            coeffs,
            file,
        } => {
            let source = match (input, coeffs) {
                (Some(id), _) => MeshSource::Input(id),
                (None, Some(path)) => MeshSource::Coefficients(path),
                (None, None) => MeshSource::Template,
            };
            let path = ws.export_mesh(&source, file.as_deref())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
