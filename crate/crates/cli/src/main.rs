use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evsplat_cli::pipeline;
use evsplat_cli::{CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "evsplat", version, about = "Event-guided dynamic Gaussian splatting on desk-scale scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `paths.output`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    no_event_loss: bool,
    #[arg(long)]
    no_motion_loss: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the scene, simulate events and write frames.
    Simulate(Common),
    /// Pretrain the flow predictor on randomized-motion copies of the scene.
    PretrainFlow(Common),
    /// Adapt the predictor to the recorded events with low-rank adapters.
    FinetuneFlow(Common),
    /// Train the dynamic Gaussian model.
    Train(Common),
    /// Render color and depth of a trained model at every recorded frame.
    Render(Common),
    /// Evaluate a trained model on the held-out frames.
    Eval(Common),
    /// Write the bundled toy scene as JSON.
    ToyScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(c: &Common) -> evsplat_cli::Result<RunConfig> {
    let mut config = RunConfig::load(&c.config)?;
    if let Some(out) = &c.output {
        config.paths.output = out.clone();
    }
    config.apply(&Overrides {
        seed: c.seed,
        iterations: c.iterations,
        no_event_loss: c.no_event_loss,
        no_motion_loss: c.no_motion_loss,
    });
    Ok(config)
}

fn run(cli: Cli) -> evsplat_cli::Result<String> {
    let json = |v: serde_json::Value| v.to_string();
    Ok(match cli.command {
        Command::Simulate(c) => json(serde_json::to_value(pipeline::simulate(&load(&c)?)?).expect("summary serializes")),
        Command::PretrainFlow(c) => {
            let r = pipeline::pretrain_flow(&load(&c)?)?;
            json(serde_json::json!({ "epoch_losses": r.epoch_losses, "skipped": r.skipped }))
        }
        Command::FinetuneFlow(c) => {
            let s = pipeline::finetune_flow(&load(&c)?)?;
            json(serde_json::json!({
                "epoch_losses": s.report.epoch_losses,
                "base_checksum": s.base_checksum_after,
                "base_unchanged": s.base_checksum_before == s.base_checksum_after,
            }))
        }
        Command::Train(c) => {
            let o = pipeline::train(&load(&c)?)?;
            json(serde_json::json!({
                "tag": o.tag,
                "rebinds": o.report.rebinds,
                "mean_psnr": o.metrics.mean_psnr,
                "mean_ssim": o.metrics.mean_ssim,
                "scene_flow_epe": o.metrics.scene_flow_epe,
            }))
        }
        Command::Render(c) => json(serde_json::json!({ "frames": pipeline::render(&load(&c)?)? })),
        Command::Eval(c) => {
            let m = pipeline::eval(&load(&c)?)?;
            json(serde_json::json!({ "tag": m.tag, "mean_psnr": m.mean_psnr, "mean_ssim": m.mean_ssim, "scene_flow_epe": m.scene_flow_epe }))
        }
        Command::ToyScene { out, seed } => {
            pipeline::write_toy_scene(&out, seed)?;
            json(serde_json::json!({ "scene": out }))
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e.kind() {
        "config" => 2,
        "io" | "format" => 3,
        "divergence" => 4,
        _ => 1,
    }
}
