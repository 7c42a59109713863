//! Subcommand implementations. Everything here is deterministic given
//! (config, seed) except the wall-clock columns in the bench CSV.

use crate::config::RunConfig;
use drwkv_core::backbone::{forward, model_flops, ModelConfig};
use drwkv_core::checkpoint::{checkpoint_load, Checkpoint};
use drwkv_core::data::image_write;
use drwkv_core::diffusion::{linear_schedule, sample_loop, NoiseSchedule, SamplerConfig, SigmaMode};
use drwkv_core::params::ParamSet;
use drwkv_core::tape::Graph;
use drwkv_core::train::{init_state, resume_state, train_loop, TrainState};
use drwkv_core::verify::{bench_wkv, loglog_slope, run_all, table1_config, TABLE1_REFS};
use drwkv_core::wkv::{set_fault_wkv_sign, wkv_flops};
use drwkv_core::{Error, Result};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// One denoising evaluation: bind the given weights into a fresh graph and
/// run the backbone. Usable as the sampler's model closure.
pub fn denoise_batch(
    ps: &ParamSet,
    cfg: &ModelConfig,
    x_t: &[f32],
    t: &[usize],
    labels: &[usize],
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    let mut g = Graph::new();
    let bound = ps.bind(&mut g)?;
    let out = forward(&mut g, ps, &bound, cfg, x_t, t, labels)?;
    let eps = g.data(out.eps).to_vec();
    let sigma = out.sigma_raw.map(|v| g.data(v).to_vec());
    Ok((eps, sigma))
}

/// Tile `count` images into one near-square canvas (row-major, −1 padding).
pub fn grid_image(images: &[f32], count: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut canvas = vec![-1.0f32; c * gh * gw];
    for i in 0..count {
        let (r, cl) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    canvas[ch * gh * gw + (r * h + y) * gw + cl * w + x] =
                        images[i * c * h * w + ch * h * w + y * w + x];
                }
            }
        }
    }
    (canvas, gh, gw)
}

fn image_ext(c: usize) -> &'static str {
    if c == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn sample_labels(cfg: &ModelConfig, count: usize, class: Option<usize>) -> Result<Option<Vec<usize>>> {
    match (cfg.num_classes, class) {
        (0, None) => Ok(None),
        (0, Some(_)) => Err(Error::Config("--class given but the model is unconditional".into())),
        (nc, Some(c)) => {
            if c >= nc {
                return Err(Error::Config(format!("--class {c} out of range (model has {nc} classes)")));
            }
            Ok(Some(vec![c; count]))
        }
        // class-conditional model, no class requested: cycle the classes
        (nc, None) => Ok(Some((0..count).map(|i| i % nc).collect())),
    }
}

fn write_sample_grid(
    out: &Path,
    state: &TrainState,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    step: u64,
) -> Result<()> {
    let m = &cfg.model;
    let count = cfg.sample_count;
    let labels = sample_labels(m, count, cfg.sample.class)?;
    let sampler = SamplerConfig {
        num_steps: cfg.sample.steps.min(m.t_steps),
        guidance_scale: cfg.sample.guidance,
        sigma_mode: cfg.sigma_mode(),
        seed: cfg.seed ^ step,
    };
    let model = |x: &[f32], t: &[usize], l: &[usize]| denoise_batch(&state.ema, m, x, t, l);
    let imgs = sample_loop(&model, count, m.pixels(), labels.as_deref(), m.num_classes, &sampler, sched)?;
    let (canvas, gh, gw) = grid_image(&imgs, count, m.c, m.h, m.w);
    let dir = out.join("samples");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("step-{step:07}.{}", image_ext(m.c)));
    image_write(&path, &canvas, m.c, gh, gw)
}

pub struct TrainArgs {
    pub resume: Option<PathBuf>,
    pub quiet: bool,
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    // dataset problems must surface before the output dir is touched
    let data = cfg.load_dataset()?;
    let state = match &args.resume {
        Some(path) => resume_state(checkpoint_load(path)?, &cfg.model)?,
        None => init_state(&cfg.model, &cfg.train)?,
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.resolved"), cfg.resolved_text())?;

    let sched = linear_schedule(cfg.model.t_steps, cfg.train.beta_start, cfg.train.beta_end)?;
    let progress_every = (cfg.train.steps / 10).max(1);
    let mut hook = |state: &TrainState, metrics: &drwkv_core::train::StepMetrics| -> Result<()> {
        if !args.quiet && (metrics.step % progress_every == 0 || metrics.step == 1) {
            println!(
                "step {}/{}  loss {:.5}  mse {:.5}  lr {:.1e}",
                metrics.step, cfg.train.steps, metrics.loss, metrics.mse, metrics.lr
            );
        }
        if cfg.sample_interval > 0 && metrics.step % cfg.sample_interval == 0 {
            write_sample_grid(&cfg.out_dir, state, cfg, &sched, metrics.step)?;
        }
        Ok(())
    };
    let out = train_loop(&cfg.model, &cfg.train, &data, &cfg.out_dir, state, Some(&mut hook))?;
    if !args.quiet {
        println!(
            "done: {} steps, final loss {:.5}; metrics {}, checkpoint {}",
            out.state.step,
            out.final_loss,
            out.metrics_path.display(),
            out.checkpoint_path.display()
        );
    }
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub num: usize,
    pub steps: Option<usize>,
    pub guidance: f32,
    pub class: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

fn model_from_header(ckpt: &Checkpoint) -> Result<ModelConfig> {
    ModelConfig::from_kv(|k| ckpt.header_get(&format!("model.{k}")).map(str::to_string))
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let ckpt = checkpoint_load(&args.checkpoint)?;
    let mcfg = model_from_header(&ckpt)?;
    // sample from the EMA weights when the checkpoint carries them
    let ps = if ckpt.ema.items.is_empty() { &ckpt.model } else { &ckpt.ema };
    if ps.items.is_empty() {
        return Err(Error::Invalid("checkpoint holds no weights".into()));
    }
    let beta_start = ckpt.header_get("train.beta_start").map_or(Ok(1e-4), |v| v.parse().map_err(|_| Error::Config("bad train.beta_start in checkpoint".into())))?;
    let beta_end = ckpt.header_get("train.beta_end").map_or(Ok(2e-2), |v| v.parse().map_err(|_| Error::Config("bad train.beta_end in checkpoint".into())))?;
    let sched = linear_schedule(mcfg.t_steps, beta_start, beta_end)?;

    if args.num == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let steps = args.steps.unwrap_or(250).min(mcfg.t_steps);
    let labels = sample_labels(&mcfg, args.num, args.class)?;
    if args.guidance != 1.0 && args.class.is_none() {
        return Err(Error::Config("guidance ≠ 1 needs --class (otherwise there is no conditional branch)".into()));
    }
    let sigma_mode = if mcfg.learn_sigma { SigmaMode::Learned } else { SigmaMode::FixedSmall };
    let sampler = SamplerConfig { num_steps: steps, guidance_scale: args.guidance, sigma_mode, seed: args.seed };
    let model = |x: &[f32], t: &[usize], l: &[usize]| denoise_batch(ps, &mcfg, x, t, l);
    let imgs = sample_loop(&model, args.num, mcfg.pixels(), labels.as_deref(), mcfg.num_classes, &sampler, &sched)?;

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("checkpoint={}\n", args.checkpoint.display()));
    manifest.push_str(&format!("num={}\nsteps={steps}\nguidance={}\n", args.num, args.guidance));
    manifest.push_str(&format!("class={}\n", args.class.map(|c| c.to_string()).unwrap_or_default()));
    manifest.push_str(&format!("sigma={}\nseed={}\n", sigma_mode.as_str(), args.seed));
    let px = mcfg.pixels();
    for i in 0..args.num {
        let name = format!("sample-{i:02}.{}", image_ext(mcfg.c));
        image_write(&args.out.join(&name), &imgs[i * px..(i + 1) * px], mcfg.c, mcfg.h, mcfg.w)?;
        let label = labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        manifest.push_str(&format!("image={name} label={label}\n"));
    }
    std::fs::write(args.out.join("manifest.txt"), manifest)?;
    println!("wrote {} samples to {}", args.num, args.out.display());
    Ok(())
}

/// Runs every suite; returns true when all passed. `--inject-fault wkv-sign`
/// flips the bonus sign inside the scan so the kernel suite must go red.
pub fn cmd_verify(inject_fault: Option<&str>) -> Result<bool> {
    match inject_fault {
        None => {}
        Some("wkv-sign") => set_fault_wkv_sign(true),
        Some(other) => return Err(Error::Config(format!("unknown fault '{other}' (known: wkv-sign)"))),
    }
    let results = run_all();
    set_fault_wkv_sign(false);
    let mut passed = 0usize;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("suite {:<16} {status} ({} ms)  {}", r.name, r.millis, r.detail);
        passed += usize::from(r.passed);
    }
    println!("{passed}/{} suites passed", results.len());
    Ok(passed == results.len())
}

pub fn cmd_flops(preset: Option<&str>, h: usize, w: usize, p: usize, c: usize) -> Result<()> {
    let selected: Vec<&str> = match preset {
        Some(name) => {
            if ModelConfig::preset(name).is_none() {
                return Err(Error::Config(format!("unknown preset '{name}' (use S|B|M|L|H)")));
            }
            vec![TABLE1_REFS.iter().find(|(n, _)| *n == name).expect("ref table").0]
        }
        None => TABLE1_REFS.iter().map(|&(n, _)| n).collect(),
    };
    for name in selected {
        let mut cfg = table1_config(name).expect("known preset");
        cfg.h = h;
        cfg.w = w;
        cfg.p = p;
        cfg.c = c;
        cfg.validate()?;
        let reference = TABLE1_REFS.iter().find(|(n, _)| *n == name).expect("ref table").1;
        let r = model_flops(&cfg);
        let total = r.total();
        let j = cfg.tokens();
        println!("preset {name} (L={}, D={}) at {h}×{w}×{c}, p={p} (J={j})", cfg.l, cfg.d);
        println!("  patch_embed   {:>16}", r.patch_embed);
        println!("  cond          {:>16}", r.cond);
        println!("  blocks_matmul {:>16}", r.blocks_matmul);
        println!("  wkv           {:>16}   ({} per call at J={j}, D={})", r.wkv, wkv_flops(j as u64, cfg.d as u64), cfg.d);
        println!("  skip_proj     {:>16}", r.skip_proj);
        println!("  decoder       {:>16}", r.decoder);
        println!(
            "  total         {:>16}   = {:.2} Gflops (kernel share {:.1}%)   Table 1 reference: {:.2} Gflops ({:+.0}% vs ref)",
            total,
            total as f64 / 1e9,
            r.wkv as f64 / total as f64 * 100.0,
            reference,
            (total as f64 / 1e9 / reference - 1.0) * 100.0
        );
    }
    Ok(())
}

pub fn cmd_bench(j_list: &[usize], d: usize, repeats: usize, assert_slopes: bool) -> Result<()> {
    // timer noise delenda est: the kernels are single-threaded, but run the
    // whole benchmark inside a one-worker pool so nothing else interleaves
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("bench pool: {e}")))?;
    let rows = pool.install(|| bench_wkv(j_list, d, repeats))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "J,scan_ns,oracle_ns")?;
    for r in &rows {
        writeln!(stdout, "{},{},{}", r.j, r.scan_ns, r.oracle_ns)?;
    }
    let scan: Vec<(f64, f64)> = rows.iter().map(|r| (r.j as f64, r.scan_ns as f64)).collect();
    let oracle: Vec<(f64, f64)> = rows.iter().map(|r| (r.j as f64, r.oracle_ns as f64)).collect();
    let (s_scan, s_oracle) = (loglog_slope(&scan), loglog_slope(&oracle));
    eprintln!("log-log slopes: scan {s_scan:.3} (target <1.4), oracle {s_oracle:.3} (target >1.7)");
    if assert_slopes && (s_scan >= 1.4 || s_oracle <= 1.7) {
        return Err(Error::Invalid(format!(
            "complexity assertion failed: scan slope {s_scan:.3} (<1.4 required), oracle slope {s_oracle:.3} (>1.7 required)"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use drwkv_core::checkpoint::checkpoint_save;
    use drwkv_core::train::{init_state, state_to_checkpoint, TrainConfig};

    #[test]
    fn train_rejects_missing_dataset_without_touching_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = crate::config::RunConfig::default();
        cfg.out_dir = out.clone();
        cfg.data.source = crate::config::DataSource::Cifar10;
        cfg.data.path = Some(dir.path().join("nope"));
        let err = cmd_train(&cfg, &TrainArgs { resume: None, quiet: true }).unwrap_err();
        assert!(err.to_string().contains("nope"), "error names the path: {err}");
        assert!(!out.exists(), "failed dataset load must not create the output dir");
    }

    fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
        let mcfg = ModelConfig {
            l: 3,
            d: 8,
            e: 2,
            p: 2,
            h: 4,
            w: 4,
            c: 1,
            cond_mode: drwkv_core::block::CondMode::AdalnZero,
            num_classes: 2,
            learn_sigma: true,
            t_steps: 20,
            normalize_decay: true,
            skip: true,
        };
        let tcfg = TrainConfig { steps: 1, batch: 1, seed: 5, ..TrainConfig::default() };
        let state = init_state(&mcfg, &tcfg).unwrap();
        let path = dir.join("tiny.drwk");
        checkpoint_save(&path, &state_to_checkpoint(&state, &mcfg, &tcfg)).unwrap();
        path
    }

    #[test]
    fn sample_is_seed_deterministic_and_rejects_corrupt_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint(dir.path());
        let run = |out: &str| {
            let args = SampleArgs {
                checkpoint: ckpt.clone(),
                num: 2,
                steps: Some(4),
                guidance: 1.0,
                class: None,
                seed: 11,
                out: dir.path().join(out),
            };
            cmd_sample(&args).unwrap();
            let read = |name: &str| std::fs::read(dir.path().join(out).join(name)).unwrap();
            (read("sample-00.pgm"), read("sample-01.pgm"))
        };
        assert_eq!(run("a"), run("b"), "same seed must give byte-identical images");

        let bad = dir.path().join("bad.drwk");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        let args = SampleArgs {
            checkpoint: bad,
            num: 1,
            steps: Some(4),
            guidance: 1.0,
            class: None,
            seed: 0,
            out: dir.path().join("c"),
        };
        assert!(cmd_sample(&args).is_err());
        // guidance without a class has no conditional branch to steer
        let args = SampleArgs {
            checkpoint: ckpt,
            num: 1,
            steps: Some(4),
            guidance: 2.0,
            class: None,
            seed: 0,
            out: dir.path().join("d"),
        };
        assert!(cmd_sample(&args).is_err());
    }

    #[test]
    fn grid_tiles_row_major_with_padding() {
        // three 1×1×2 images on a 2×2 grid; the empty cell stays −1
        let imgs = [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6];
        let (canvas, gh, gw) = grid_image(&imgs, 3, 1, 1, 2);
        assert_eq!((gh, gw), (2, 4));
        assert_eq!(canvas, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, -1.0, -1.0]);
    }

    #[test]
    fn sample_labels_cover_the_contract() {
        let mut cfg = crate::config::RunConfig::default().model;
        cfg.num_classes = 0;
        assert_eq!(sample_labels(&cfg, 3, None).unwrap(), None);
        assert!(sample_labels(&cfg, 3, Some(0)).is_err());
        cfg.num_classes = 2;
        assert_eq!(sample_labels(&cfg, 4, None).unwrap(), Some(vec![0, 1, 0, 1]));
        assert_eq!(sample_labels(&cfg, 2, Some(1)).unwrap(), Some(vec![1, 1]));
        assert!(sample_labels(&cfg, 2, Some(2)).is_err());
    }
}
