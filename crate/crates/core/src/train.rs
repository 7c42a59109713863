//! Training harness: AdamW (decoupled weight decay, here fixed at 0) with
//! bias correction, staged learning rate, per-step EMA, CSV metrics, periodic
//! checkpoints, and deterministic resume from a saved RNG state.

use crate::backbone::{init_backbone, ModelConfig};
use crate::checkpoint::{checkpoint_save, Checkpoint};
use crate::data::{hflip, Dataset};
use crate::diffusion::{draw_batch, ema_update, linear_schedule, training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::Graph;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: ParamSet,
    pub v: ParamSet,
    /// completed optimizer steps (t in the bias correction)
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for t in &params.items {
            m.add(t.name.clone(), t.rows, t.cols, vec![0.0; t.numel()]).expect("fresh set");
            v.add(t.name.clone(), t.rows, t.cols, vec![0.0; t.numel()]).expect("fresh set");
        }
        AdamW { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    /// Rebuild from checkpointed moments; shape-checked against the model.
    pub fn resume(params: &ParamSet, m: ParamSet, v: ParamSet, step: u64) -> Result<Self> {
        for (label, set) in [("m", &m), ("v", &v)] {
            if set.items.len() != params.items.len() {
                return Err(Error::CkptShape(format!("optimizer {label}: {} tensors vs model {}", set.items.len(), params.items.len())));
            }
            for (a, b) in set.items.iter().zip(&params.items) {
                if a.name != b.name || a.rows != b.rows || a.cols != b.cols {
                    return Err(Error::CkptShape(format!("optimizer {label}: tensor '{}' does not match model '{}' {}×{}", a.name, b.name, b.rows, b.cols)));
                }
            }
        }
        Ok(AdamW { m, v, step, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 })
    }

    /// One update. `grads[i]` pairs with `params.items[i]`; `None` means the
    /// tensor never entered the graph and is treated as an all-zero gradient.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Option<&[f32]>], lr: f32) -> Result<()> {
        if grads.len() != params.items.len() {
            return Err(Error::Invalid(format!("{} gradients for {} tensors", grads.len(), params.items.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        for (i, t) in params.items.iter_mut().enumerate() {
            if let Some(gr) = grads[i] {
                if gr.len() != t.numel() {
                    return Err(Error::shape("adamw", format!("grad len {} vs tensor '{}' {}", gr.len(), t.name, t.numel())));
                }
            }
            let m = &mut self.m.items[i].data;
            let v = &mut self.v.items[i].data;
            for j in 0..t.data.len() {
                let g = grads[i].map_or(0.0, |gr| gr[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let mut p = t.data[j] as f64;
                p -= lr as f64 * (mhat / (vhat.sqrt() + self.eps as f64) + self.weight_decay as f64 * p);
                t.data[j] = p as f32;
            }
        }
        Ok(())
    }
}

/// Two-stage schedule: `hi` until `switch_frac` of the run, then `lo`.
pub fn staged_lr(step: u64, total_steps: u64, hi: f32, lo: f32, switch_frac: f64) -> f32 {
    if (step as f64) < switch_frac * total_steps as f64 {
        hi
    } else {
        lo
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_hi: f32,
    pub lr_lo: f32,
    pub lr_switch_frac: f64,
    pub ema_decay: f32,
    pub p_drop: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hflip: bool,
    pub log_interval: u64,
    /// checkpoint every k steps; 0 = final checkpoint only
    pub save_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 32,
            lr_hi: 1e-4,
            lr_lo: 3e-5,
            lr_switch_frac: 0.8,
            ema_decay: 0.9999,
            p_drop: 0.1,
            beta_start: 1e-4,
            beta_end: 2e-2,
            hflip: true,
            log_interval: 1,
            save_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_switch_frac) || !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config("lr_switch_frac and p_drop must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0,1]".into()));
        }
        if self.lr_hi <= 0.0 || self.lr_lo <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr_hi", self.lr_hi.to_string()),
            ("lr_lo", self.lr_lo.to_string()),
            ("lr_switch_frac", self.lr_switch_frac.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("p_drop", self.p_drop.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("hflip", self.hflip.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("save_interval", self.save_interval.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub opt: AdamW,
    /// completed training steps
    pub step: u64,
    pub rng: Rng,
}

/// Fresh state: weights from `init_backbone` seeded by `tcfg.seed`; the EMA
/// shadow starts as a copy of the weights; the same RNG then drives training
/// draws (so its state at any step is a pure function of seed and step).
pub fn init_state(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainState> {
    mcfg.validate()?;
    tcfg.validate()?;
    let mut rng = Rng::new(tcfg.seed);
    let params = init_backbone(mcfg, &mut rng)?;
    let ema = params.clone();
    let opt = AdamW::new(&params);
    Ok(TrainState { params, ema, opt, step: 0, rng })
}

pub fn state_to_checkpoint(state: &TrainState, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Checkpoint {
    let mut ckpt = Checkpoint {
        header: Vec::new(),
        model: state.params.clone(),
        ema: state.ema.clone(),
        opt_m: state.opt.m.clone(),
        opt_v: state.opt.v.clone(),
    };
    for (k, v) in mcfg.to_kv() {
        ckpt.header_set(&format!("model.{k}"), v);
    }
    for (k, v) in tcfg.to_kv() {
        ckpt.header_set(&format!("train.{k}"), v);
    }
    ckpt.header_set("step", state.step.to_string());
    ckpt.header_set("opt_step", state.opt.step.to_string());
    ckpt.header_set("rng_state", state.rng.state().to_string());
    ckpt
}

/// Reconstruct training state from a checkpoint. The stored model config must
/// match `mcfg` exactly — silently reinterpreting weights would corrupt runs.
pub fn resume_state(ckpt: Checkpoint, mcfg: &ModelConfig) -> Result<TrainState> {
    for (k, v) in mcfg.to_kv() {
        let key = format!("model.{k}");
        match ckpt.header_get(&key) {
            Some(got) if got == v => {}
            got => {
                return Err(Error::CkptShape(format!("config mismatch at '{key}': checkpoint has {:?}, run wants '{v}'", got)));
            }
        }
    }
    let step: u64 = ckpt.header_parse("step")?;
    let opt_step: u64 = ckpt.header_parse("opt_step")?;
    let rng_state: u64 = ckpt.header_parse("rng_state")?;
    let Checkpoint { model, ema, opt_m, opt_v, .. } = ckpt;
    if ema.items.len() != model.items.len() {
        return Err(Error::CkptShape(format!("EMA has {} tensors vs model {}", ema.items.len(), model.items.len())));
    }
    let opt = AdamW::resume(&model, opt_m, opt_v, opt_step)?;
    Ok(TrainState { params: model, ema, opt, step, rng: Rng::from_state(rng_state) })
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    /// 1-based: the number of completed steps after this update
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub vlb: Option<f64>,
    pub lr: f32,
    pub ema_decay: f32,
}

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        let vlb = self.vlb.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}\n", self.step, self.loss, self.mse, vlb, self.lr, self.ema_decay)
    }
}

pub const METRICS_HEADER: &str = "step,loss,mse,vlb,lr,ema_decay\n";

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_loss: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Hook called after every step (sample grids, progress displays, …).
pub type StepHook<'a> = dyn FnMut(&TrainState, &StepMetrics) -> Result<()> + 'a;

fn non_finite_abort(state: &TrainState, metrics: &StepMetrics) -> Error {
    let worst = state
        .params
        .items
        .iter()
        .find(|t| t.data.iter().any(|v| !v.is_finite()))
        .map(|t| t.name.as_str())
        .unwrap_or("(all parameters finite)");
    Error::Invalid(format!(
        "aborting at step {}: non-finite loss {} (mse {}, vlb {:?}); first non-finite parameter: {}",
        metrics.step, metrics.loss, metrics.mse, metrics.vlb, worst
    ))
}

/// One optimizer step over a drawn batch. Draw order per step: batch indices,
/// then flip coins (only when augmentation is on), then the diffusion draws.
pub fn train_step(state: &mut TrainState, mcfg: &ModelConfig, tcfg: &TrainConfig, sched: &NoiseSchedule, data: &Dataset) -> Result<StepMetrics> {
    let pixels = mcfg.pixels();
    let lr = staged_lr(state.step, tcfg.steps, tcfg.lr_hi, tcfg.lr_lo, tcfg.lr_switch_frac);

    let idx: Vec<usize> = (0..tcfg.batch).map(|_| state.rng.below(data.n)).collect();
    let flips: Vec<bool> = if tcfg.hflip {
        (0..tcfg.batch).map(|_| state.rng.coin(0.5)).collect()
    } else {
        vec![false; tcfg.batch]
    };
    let mut x0 = Vec::with_capacity(tcfg.batch * pixels);
    for (&i, &flip) in idx.iter().zip(&flips) {
        let base = x0.len();
        x0.extend_from_slice(data.image(i));
        if flip {
            hflip(&mut x0[base..], data.c, data.h, data.w);
        }
    }
    let labels: Vec<usize> = match &data.labels {
        Some(l) if mcfg.num_classes > 0 => idx.iter().map(|&i| l[i]).collect(),
        _ => Vec::new(),
    };
    let draws = draw_batch(&mut state.rng, tcfg.batch, pixels, mcfg.t_steps, tcfg.p_drop);

    let mut g = Graph::new();
    let bound = state.params.bind(&mut g)?;
    let parts = training_loss(&mut g, &state.params, &bound, mcfg, sched, &x0, &labels, &draws)?;
    let metrics = StepMetrics {
        step: state.step + 1,
        loss: g.value(parts.loss) as f64,
        mse: g.value(parts.mse) as f64,
        vlb: parts.vlb.map(|v| g.value(v) as f64),
        lr,
        ema_decay: tcfg.ema_decay,
    };
    if !metrics.loss.is_finite() {
        return Err(non_finite_abort(state, &metrics));
    }
    g.backward(parts.loss)?;
    let grads: Vec<Option<&[f32]>> = bound.vars.iter().map(|&v| g.grad(v)).collect();
    state.opt.apply(&mut state.params, &grads, lr)?;
    ema_update(&mut state.ema, &state.params, tcfg.ema_decay)?;
    state.step += 1;
    Ok(metrics)
}

/// Run (or continue) training until `tcfg.steps` completed steps. Returns the
/// final state plus paths to the metrics CSV and last checkpoint. A fresh run
/// truncates metrics.csv; a resumed run appends.
pub fn train_loop(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    mut state: TrainState,
    mut hook: Option<&mut StepHook<'_>>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    data.check()?;
    if mcfg.num_classes > 0 {
        if data.labels.is_none() {
            return Err(Error::Config("model is class-conditional but the dataset has no labels".into()));
        }
        if data.num_classes != mcfg.num_classes {
            return Err(Error::Config(format!("dataset has {} classes, model expects {}", data.num_classes, mcfg.num_classes)));
        }
    }
    if data.pixels() != mcfg.pixels() || data.c != mcfg.c || data.h != mcfg.h || data.w != mcfg.w {
        return Err(Error::Config(format!("dataset {}×{}×{} vs model {}×{}×{}", data.c, data.h, data.w, mcfg.c, mcfg.h, mcfg.w)));
    }
    if state.step >= tcfg.steps {
        return Err(Error::Config(format!("state already at step {} ≥ steps {}", state.step, tcfg.steps)));
    }
    let sched = linear_schedule(mcfg.t_steps, tcfg.beta_start, tcfg.beta_end)?;

    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = if state.step == 0 {
        let mut f = fs::File::create(&metrics_path)?;
        f.write_all(METRICS_HEADER.as_bytes())?;
        f
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    };

    let ckpt_path = out_dir.join("checkpoint.drwk");
    let mut final_loss = f64::NAN;
    while state.step < tcfg.steps {
        let metrics = train_step(&mut state, mcfg, tcfg, &sched, data)?;
        final_loss = metrics.loss;
        if metrics.step % tcfg.log_interval == 0 || metrics.step == tcfg.steps {
            metrics_file.write_all(metrics.csv_line().as_bytes())?;
            metrics_file.flush()?;
        }
        let save_due = tcfg.save_interval > 0 && metrics.step % tcfg.save_interval == 0;
        if save_due || metrics.step == tcfg.steps {
            checkpoint_save(&ckpt_path, &state_to_checkpoint(&state, mcfg, tcfg))?;
        }
        if let Some(h) = hook.as_deref_mut() {
            h(&state, &metrics)?;
        }
    }
    Ok(TrainOutcome { state, final_loss, metrics_path, checkpoint_path: ckpt_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::CondMode;
    use crate::checkpoint::checkpoint_load;
    use crate::data::synth_two_blobs;

    fn tiny_cfg() -> (ModelConfig, TrainConfig) {
        let mcfg = ModelConfig {
            l: 3,
            d: 8,
            e: 2,
            p: 2,
            h: 4,
            w: 4,
            c: 1,
            cond_mode: CondMode::AdalnZero,
            num_classes: 2,
            learn_sigma: true,
            t_steps: 50,
            normalize_decay: true,
            skip: true,
        };
        let tcfg = TrainConfig { steps: 8, batch: 4, log_interval: 1, save_interval: 0, seed: 3, ..Default::default() };
        (mcfg, tcfg)
    }

    #[test]
    fn zero_gradient_step_from_cold_state_keeps_params() {
        let mut ps = ParamSet::new();
        ps.add("w", 2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let before = ps.get("w").unwrap().data.clone();
        let mut opt = AdamW::new(&ps);
        let zeros = vec![0f32; 4];
        opt.apply(&mut ps, &[Some(&zeros)], 1e-4).unwrap();
        opt.apply(&mut ps, &[None], 1e-4).unwrap();
        let after = &ps.get("w").unwrap().data;
        assert!(before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adam_first_steps_match_hand_computation() {
        // constant gradient 1: bias correction makes each update exactly
        // lr·1/(1+eps) in exact arithmetic
        let mut ps = ParamSet::new();
        ps.add("w", 1, 1, vec![1.0]).unwrap();
        let mut opt = AdamW::new(&ps);
        let g = vec![1f32];
        opt.apply(&mut ps, &[Some(&g)], 0.1).unwrap();
        assert!((ps.get("w").unwrap().data[0] - 0.9).abs() < 1e-6);
        opt.apply(&mut ps, &[Some(&g)], 0.1).unwrap();
        assert!((ps.get("w").unwrap().data[0] - 0.8).abs() < 1e-5);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn staged_lr_switches_at_fraction() {
        assert_eq!(staged_lr(0, 100, 1e-4, 3e-5, 0.8), 1e-4);
        assert_eq!(staged_lr(79, 100, 1e-4, 3e-5, 0.8), 1e-4);
        assert_eq!(staged_lr(80, 100, 1e-4, 3e-5, 0.8), 3e-5);
        assert_eq!(staged_lr(99, 100, 1e-4, 3e-5, 0.8), 3e-5);
    }

    #[test]
    fn ema_differs_from_live_params_after_update() {
        let (mcfg, tcfg) = tiny_cfg();
        let data = synth_two_blobs(16, 4, 4, 9).unwrap();
        let mut state = init_state(&mcfg, &tcfg).unwrap();
        let sched = linear_schedule(mcfg.t_steps, tcfg.beta_start, tcfg.beta_end).unwrap();
        train_step(&mut state, &mcfg, &tcfg, &sched, &data).unwrap();
        // at least one trained tensor must now diverge from its shadow
        let diverged = state
            .params
            .items
            .iter()
            .zip(&state.ema.items)
            .any(|(p, e)| p.data.iter().zip(&e.data).any(|(a, b)| a != b));
        assert!(diverged);
    }

    #[test]
    fn metrics_csv_has_expected_shape_and_training_runs() {
        let (mcfg, tcfg) = tiny_cfg();
        let data = synth_two_blobs(16, 4, 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let state = init_state(&mcfg, &tcfg).unwrap();
        let out = train_loop(&mcfg, &tcfg, &data, dir.path(), state, None).unwrap();
        assert!(out.final_loss.is_finite());
        assert_eq!(out.state.step, tcfg.steps);
        let csv = std::fs::read_to_string(&out.metrics_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.trim_end());
        assert_eq!(lines.len() as u64, 1 + tcfg.steps);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 6, "bad row: {line}");
        }
        assert!(checkpoint_load(&out.checkpoint_path).is_ok());
    }

    #[test]
    fn same_seed_reproduces_metrics_bitwise() {
        let (mcfg, tcfg) = tiny_cfg();
        let data = synth_two_blobs(16, 4, 4, 9).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_loop(&mcfg, &tcfg, &data, d1.path(), init_state(&mcfg, &tcfg).unwrap(), None).unwrap();
        let b = train_loop(&mcfg, &tcfg, &data, d2.path(), init_state(&mcfg, &tcfg).unwrap(), None).unwrap();
        assert_eq!(
            std::fs::read_to_string(&a.metrics_path).unwrap(),
            std::fs::read_to_string(&b.metrics_path).unwrap()
        );
    }

    #[test]
    fn resume_matches_straight_run() {
        let (mcfg, tcfg) = tiny_cfg();
        let data = synth_two_blobs(16, 4, 4, 9).unwrap();

        let d1 = tempfile::tempdir().unwrap();
        let straight = train_loop(&mcfg, &tcfg, &data, d1.path(), init_state(&mcfg, &tcfg).unwrap(), None).unwrap();

        // same run split at step 4 through a checkpoint round-trip
        let d2 = tempfile::tempdir().unwrap();
        let half = TrainConfig { steps: 4, ..tcfg.clone() };
        let first = train_loop(&mcfg, &half, &data, d2.path(), init_state(&mcfg, &half).unwrap(), None).unwrap();
        let ckpt = checkpoint_load(&first.checkpoint_path).unwrap();
        let resumed_state = resume_state(ckpt, &mcfg).unwrap();
        assert_eq!(resumed_state.step, 4);
        let second = train_loop(&mcfg, &tcfg, &data, d2.path(), resumed_state, None).unwrap();

        let diff = (straight.final_loss - second.final_loss).abs();
        assert!(diff <= 1e-6, "resume-equivalence violated: {diff}");
        for (a, b) in straight.state.params.items.iter().zip(&second.state.params.items) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "params diverge at {}", a.name);
        }
        // the split run's CSV is the straight run's CSV (append on resume)
        assert_eq!(
            std::fs::read_to_string(&straight.metrics_path).unwrap(),
            std::fs::read_to_string(&second.metrics_path).unwrap()
        );
    }

    #[test]
    fn resume_rejects_config_mismatch() {
        let (mcfg, tcfg) = tiny_cfg();
        let data = synth_two_blobs(16, 4, 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&mcfg, &tcfg, &data, dir.path(), init_state(&mcfg, &tcfg).unwrap(), None).unwrap();
        let ckpt = checkpoint_load(&out.checkpoint_path).unwrap();
        let mut other = mcfg.clone();
        other.d = 12;
        assert!(matches!(resume_state(ckpt, &other), Err(Error::CkptShape(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (mcfg, tcfg) = tiny_cfg();
        let data = synth_two_blobs(16, 4, 4, 9).unwrap();
        let mut state = init_state(&mcfg, &tcfg).unwrap();
        state.params.get_mut("patch_embed").unwrap().data[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = train_loop(&mcfg, &tcfg, &data, dir.path(), state, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite") || msg.contains("nan") || msg.contains("NaN"), "unhelpful abort: {msg}");
    }

    #[test]
    fn loss_decreases_on_tiny_run() {
        let (mcfg, mut tcfg) = tiny_cfg();
        tcfg.steps = 120;
        tcfg.batch = 8;
        tcfg.lr_hi = 3e-3;
        tcfg.lr_lo = 1e-3;
        let data = synth_two_blobs(64, 4, 4, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&mcfg, &tcfg, &data, dir.path(), init_state(&mcfg, &tcfg).unwrap(), None).unwrap();
        let csv = std::fs::read_to_string(&out.metrics_path).unwrap();
        let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "no improvement: first-20 avg {head}, last-20 avg {tail}");
    }
}
