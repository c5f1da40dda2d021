//! `cassi-fusion`: simulate dual-arm CASSI measurements, train and run LADMM-Net, reconstruct
//! block-CS images, and score reconstructions.

use std::path::PathBuf;
use std::process::ExitCode;

use cassi_fusion::pipeline::{
    self, cmd_cs_recon, cmd_cs_train, cmd_evaluate, cmd_fuse, cmd_simulate, cmd_train, read_config,
    CsReconRequest, CsTrainCommandConfig, EvaluateConfig, FuseConfig, SimulateConfig,
    TrainCommandConfig,
};
use cassi_fusion::{metrics::format_db, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cassi-fusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate both arms from a cube (or a synthetic scene) into a scene directory
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// overrides `output_dir`
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train LADMM-Net on simulated scenes
    Train {
        #[arg(long)]
        config: PathBuf,
        /// overrides `checkpoint`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fuse a scene with a trained network, or with the classical solver when no checkpoint is given
    Fuse {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        rgb_png: Option<PathBuf>,
        /// band indices for the composite, as R,G,B
        #[arg(long, value_delimiter = ',')]
        rgb_bands: Option<Vec<usize>>,
    },
    /// Train the block compressive-sensing network on a directory of grayscale images
    CsTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample an image block-wise and reconstruct it with a trained CS network
    CsRecon {
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        matrix_seed: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// also write the Hᵀy baseline image
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Score estimates against references; writes name,psnr,ssim,sam,runtime_s
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn fuse_config(
    config: Option<PathBuf>,
    scene: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    output: Option<PathBuf>,
    rgb_png: Option<PathBuf>,
    rgb_bands: Option<Vec<usize>>,
) -> Result<FuseConfig, Error> {
    let mut cfg = match config {
        Some(path) => read_config::<FuseConfig>(path)?,
        None => FuseConfig {
            scene: scene
                .clone()
                .ok_or_else(|| Error::InvalidArgument("fuse needs --config or --scene".into()))?,
            checkpoint: None,
            solver: None,
            output: output
                .clone()
                .ok_or_else(|| Error::InvalidArgument("fuse needs --config or --output".into()))?,
            rgb_png: None,
            rgb_bands: None,
        },
    };
    if let Some(s) = scene {
        cfg.scene = s;
    }
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c);
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    if let Some(p) = rgb_png {
        cfg.rgb_png = Some(p);
    }
    if let Some(b) = rgb_bands {
        cfg.rgb_bands = Some(b.try_into().map_err(|_| {
            Error::InvalidArgument("--rgb-bands takes exactly three indices".into())
        })?);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    pipeline::configure_threads()?;
    match cli.command {
        Command::Simulate { config, output_dir } => {
            let mut cfg: SimulateConfig = read_config(config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let m = cmd_simulate(&cfg)?;
            println!(
                "simulated {}x{}x{}: W_hs={} W_ms={} -> {}",
                m.dims.0,
                m.dims.1,
                m.dims.2,
                m.hs.shots,
                m.ms.shots,
                cfg.output_dir.display()
            );
        }
        Command::Train { config, checkpoint } => {
            let mut cfg: TrainCommandConfig = read_config(config)?;
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            let history = cmd_train(&cfg)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs: total {:.6} data {:.6} inv {:.6} -> {}",
                    last.epoch,
                    last.total,
                    last.data,
                    last.inv,
                    cfg.checkpoint.display()
                );
            }
        }
        Command::Fuse {
            config,
            scene,
            checkpoint,
            output,
            rgb_png,
            rgb_bands,
        } => {
            let cfg = fuse_config(config, scene, checkpoint, output, rgb_png, rgb_bands)?;
            cmd_fuse(&cfg)?;
            println!("fused {} -> {}", cfg.scene.display(), cfg.output.display());
        }
        Command::CsTrain { config } => {
            let cfg: CsTrainCommandConfig = read_config(config)?;
            cmd_cs_train(&cfg)?;
            println!("trained CS network -> {}", cfg.checkpoint.display());
        }
        Command::CsRecon {
            ratio,
            matrix_seed,
            checkpoint,
            input,
            output,
            baseline,
        } => {
            let (net, base) = cmd_cs_recon(&CsReconRequest {
                ratio,
                matrix_seed,
                checkpoint,
                input,
                output: output.clone(),
                baseline,
            })?;
            println!(
                "reconstructed -> {}: psnr {} dB (Hᵀy baseline {} dB)",
                output.display(),
                format_db(net),
                format_db(base)
            );
        }
        Command::Evaluate { config } => {
            let cfg: EvaluateConfig = read_config(config)?;
            let rows = cmd_evaluate(&cfg)?;
            for r in &rows {
                println!(
                    "{}: psnr {} dB, ssim {:.4}, sam {:.4} rad",
                    r.name,
                    format_db(r.report.psnr_db),
                    r.report.ssim,
                    r.report.sam_rad
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}
