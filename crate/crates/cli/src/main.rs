use clap::{Parser, Subcommand};
use drwkv_cli::commands::{cmd_bench, cmd_flops, cmd_sample, cmd_train, cmd_verify, SampleArgs, TrainArgs};
use drwkv_cli::config::RunConfig;
use drwkv_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drwkv", about = "Diffusion model with a bidirectional-RWKV backbone", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (two-blob synthetic data or CIFAR-10 batches)
    Train {
        /// flat key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// resume from this checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// override train.steps from the config
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Draw samples from a trained checkpoint
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        num: usize,
        /// respaced sampler steps (default 250, capped at the model's T)
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        guidance: f32,
        /// class label for every sample; omit to cycle classes
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/samples")]
        out: PathBuf,
    },
    /// Run every self-check suite; nonzero exit on any failure
    Verify {
        /// break a named invariant on purpose (known: wkv-sign)
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Per-component FLOPs for the size presets, next to the reference table
    Flops {
        /// S|B|M|L|H; omit for all five
        preset: Option<String>,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        patch: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
    },
    /// Time the linear scan against the quadratic oracle; CSV on stdout
    Bench {
        /// comma-separated sequence lengths, ascending
        #[arg(long, default_value = "256,1024,4096")]
        j: String,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// report slopes without failing on them
        #[arg(long)]
        no_assert: bool,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("DRWKV_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                // ignore the error if a pool was already built (tests, repeat calls)
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { config, seed, out, checkpoint, steps, quiet } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            cmd_train(&cfg, &TrainArgs { resume: checkpoint, quiet }).map(|()| true)
        }
        Cmd::Sample { checkpoint, num, steps, guidance, class, seed, out } => {
            cmd_sample(&SampleArgs { checkpoint, num, steps, guidance, class, seed, out }).map(|()| true)
        }
        Cmd::Verify { inject_fault } => cmd_verify(inject_fault.as_deref()),
        Cmd::Flops { preset, height, width, patch, channels } => {
            cmd_flops(preset.as_deref(), height, width, patch, channels).map(|()| true)
        }
        Cmd::Bench { j, d, repeats, no_assert } => {
            let j_list = j
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad sequence length '{s}'"))))
                .collect::<Result<Vec<_>>>()?;
            cmd_bench(&j_list, d, repeats, !no_assert).map(|()| true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
