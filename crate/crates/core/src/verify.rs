//! Runtime verification suites behind `drwkv verify`. Each suite re-executes
//! one oracle family from the test corpus — kernel equivalence, gradient
//! checks against finite differences, FLOPs accounting, schedule invariants,
//! the closed-form sampler oracle, init identities, data round-trips, and the
//! complexity benchmark — and reports a single pass/fail line.

use crate::backbone::{forward, init_backbone, model_flops, patchify, unpatchify, ModelConfig};
use crate::block::{block_forward, init_block, BlockCtx, BlockVars, CondMode, Modulation};
use crate::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
use crate::data::{hflip, image_write, synth_two_blobs};
use crate::diffusion::{linear_schedule, sample_loop, SamplerConfig, SigmaMode};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::reference::ref_probe_loss;
use crate::rng::Rng;
use crate::tape::Graph;
use crate::train::{init_state, resume_state, train_loop, TrainConfig};
use crate::wkv::{
    wkv_backward, wkv_bidirectional, wkv_causal, wkv_flops, wkv_oracle, wkv_oracle_causal,
    wkv_oracle_f64, WkvParams,
};
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

type Suite = fn() -> Result<String>;

/// Suite registry in report order; every brute-force oracle lives in exactly
/// one of these.
pub const SUITES: &[(&str, Suite)] = &[
    ("kernel_oracle", || check_kernel_oracle(500, 401)),
    ("gradients", check_gradients),
    ("flops", check_flops),
    ("schedule", check_schedule),
    ("sampler_oracle", check_sampler_oracle),
    ("init_identities", check_init_identities),
    ("data_roundtrips", check_data_roundtrips),
    ("complexity", || check_complexity(&[256, 1024, 4096], 16, 3, true)),
];

pub fn run_suite(name: &'static str, f: Suite) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(msg) => (true, msg),
        Err(e) => (false, e.to_string()),
    };
    SuiteResult { name, passed, detail, millis: start.elapsed().as_millis() }
}

pub fn run_all() -> Vec<SuiteResult> {
    SUITES.iter().map(|&(name, f)| run_suite(name, f)).collect()
}

fn rel_err(a: f32, b: f32) -> f32 {
    (a - b).abs() / (b.abs() + 1e-6)
}

/// Criterion-2 gate: relative 1e-3, absolute floor 1e-2 below magnitude 1e-4.
fn grad_gate(got: f64, want: f64) -> bool {
    if want.abs() >= 1e-4 {
        (got - want).abs() / want.abs() <= 1e-3
    } else {
        (got - want).abs() <= 1e-2
    }
}

fn rand_kernel_case(rng: &mut Rng, j: usize, d: usize, kmax: f32) -> (Vec<f32>, Vec<f32>, WkvParams) {
    let mut k = vec![0f32; j * d];
    let mut v = vec![0f32; j * d];
    rng.fill_uniform(&mut k, -kmax, kmax);
    rng.fill_uniform(&mut v, -2.0, 2.0);
    let mut w = vec![0f32; d];
    let mut u = vec![0f32; d];
    rng.fill_uniform(&mut w, 0.0, 2.0);
    rng.fill_uniform(&mut u, -1.0, 1.0);
    (k, v, WkvParams { w, u, normalize_decay: true })
}

/// Criterion 1: random cases over J∈{1..64}, D∈{1..16}, |k|≤80, scan vs
/// brute-force oracle, both directions, max relative error ≤ 1e-5.
pub fn check_kernel_oracle(cases: usize, seed: u64) -> Result<String> {
    let mut rng = Rng::new(seed);
    let mut max_rel = 0f32;
    for case in 0..cases {
        let j = 1 + rng.below(64);
        let d = 1 + rng.below(16);
        let (k, v, mut params) = rand_kernel_case(&mut rng, j, d, 80.0);
        params.normalize_decay = case % 2 == 0;
        let scan = wkv_bidirectional(&k, &v, &params, j, d)?;
        let oracle = wkv_oracle(&k, &v, &params, j, d)?;
        for (i, (s, o)) in scan.iter().zip(&oracle).enumerate() {
            let r = rel_err(*s, *o);
            max_rel = max_rel.max(r);
            if r > 1e-5 {
                return Err(Error::Invalid(format!(
                    "case {case} (J={j} D={d} elem {i}): scan {s} vs oracle {o}, rel err {r:.3e} > 1e-5"
                )));
            }
        }
        let scan_c = wkv_causal(&k, &v, &params, j, d)?;
        let oracle_c = wkv_oracle_causal(&k, &v, &params, j, d)?;
        for (s, o) in scan_c.iter().zip(&oracle_c) {
            let r = rel_err(*s, *o);
            max_rel = max_rel.max(r);
            if r > 1e-5 {
                return Err(Error::Invalid(format!(
                    "case {case} causal (J={j} D={d}): scan {s} vs oracle {o}, rel err {r:.3e} > 1e-5"
                )));
            }
        }
    }
    Ok(format!("{cases} random cases (J≤64, D≤16, |k|≤80), both directions: max rel err {max_rel:.2e} ≤ 1e-5"))
}

/// Criterion 2, kernel part: `wkv_backward` vs central finite differences of
/// the f64 oracle over every input coordinate of several random cases.
pub fn check_wkv_gradients(seed: u64) -> Result<String> {
    let (j, d) = (6usize, 4usize);
    let mut rng = Rng::new(seed);
    let mut checked = 0usize;
    for (bidi, norm) in [(true, true), (true, false), (false, true), (false, false)] {
        for _rep in 0..2 {
            let mut k = vec![0f32; j * d];
            let mut v = vec![0f32; j * d];
            let mut w = vec![0f32; d];
            let mut u = vec![0f32; d];
            rng.fill_uniform(&mut k, -2.0, 2.0);
            rng.fill_uniform(&mut v, -2.0, 2.0);
            rng.fill_uniform(&mut w, 0.3, 2.0);
            rng.fill_uniform(&mut u, -1.0, 1.0);
            let mut c = vec![0f32; j * d];
            rng.fill_uniform(&mut c, -1.0, 1.0);
            let params = WkvParams { w: w.clone(), u: u.clone(), normalize_decay: norm };
            let (dk, dv, dw, du) = wkv_backward(&k, &v, &params, &c, j, d, bidi)?;

            let loss = |k: &[f32], v: &[f32], w: &[f32], u: &[f32]| -> f64 {
                let f = |s: &[f32]| s.iter().map(|&x| x as f64).collect::<Vec<f64>>();
                let h = wkv_oracle_f64(&f(k), &f(v), &f(w), &f(u), norm, !bidi, j, d);
                h.iter().zip(&c).map(|(&hi, &ci)| hi * ci as f64).sum()
            };
            let probe = |buf: &mut Vec<f32>, idx: usize, got: f32,
                             eval: &mut dyn FnMut(&[f32]) -> f64|
             -> Result<()> {
                let x0 = buf[idx];
                let h = 1e-3f32.max(x0.abs() * 1e-3);
                let (hp, hm) = (x0 + h, x0 - h);
                buf[idx] = hp;
                let lp = eval(buf);
                buf[idx] = hm;
                let lm = eval(buf);
                buf[idx] = x0;
                let fd = (lp - lm) / (hp as f64 - hm as f64);
                if !grad_gate(got as f64, fd) {
                    return Err(Error::Invalid(format!(
                        "wkv grad mismatch (bidi={bidi} norm={norm} idx {idx}): analytic {got} vs fd {fd}"
                    )));
                }
                Ok(())
            };
            for i in 0..j * d {
                probe(&mut k, i, dk[i], &mut |kk| loss(kk, &v, &w, &u))?;
                probe(&mut v, i, dv[i], &mut |vv| loss(&k, vv, &w, &u))?;
                checked += 2;
            }
            for i in 0..d {
                probe(&mut w, i, dw[i], &mut |ww| loss(&k, &v, ww, &u))?;
                probe(&mut u, i, du[i], &mut |uu| loss(&k, &v, &w, uu))?;
                checked += 2;
            }
        }
    }
    Ok(format!("{checked} kernel input coordinates vs central FD (rel ≤1e-3)"))
}

fn small_cfg(mode: CondMode, classes: usize) -> ModelConfig {
    ModelConfig {
        l: 3,
        d: 8,
        e: 2,
        p: 2,
        h: 4,
        w: 4,
        c: 1,
        cond_mode: mode,
        num_classes: classes,
        learn_sigma: true,
        t_steps: 50,
        normalize_decay: true,
        skip: true,
    }
}

fn randomize(ps: &mut ParamSet, seed: u64) {
    let mut rng = Rng::new(seed);
    for t in &mut ps.items {
        if t.name.contains("mu_") {
            rng.fill_uniform(&mut t.data, 0.2, 0.8);
        } else if t.name.contains("decay_raw") {
            rng.fill_uniform(&mut t.data, -1.0, 0.5);
        } else {
            rng.fill_uniform(&mut t.data, -0.3, 0.3);
        }
    }
}

/// Criterion 2, model part: full-model backward vs central FD of the f64
/// straight-line reference on ≥ `min_probes` randomly chosen parameters.
pub fn check_model_gradients(min_probes: usize, seed: u64) -> Result<String> {
    let cfg = small_cfg(CondMode::AdalnZero, 3);
    let mut ps = init_backbone(&cfg, &mut Rng::new(seed))?;
    randomize(&mut ps, seed + 1);
    let bsz = 2;
    let mut x = vec![0f32; bsz * cfg.pixels()];
    Rng::new(seed + 2).fill_uniform(&mut x, -1.0, 1.0);
    let t = [3usize, 44];
    let labels = vec![1usize, 3];
    let px = bsz * cfg.pixels();
    let mut te = vec![0f32; px];
    let mut ts = vec![0f32; px];
    Rng::new(seed + 3).fill_uniform(&mut te, -1.0, 1.0);
    Rng::new(seed + 4).fill_uniform(&mut ts, -1.0, 1.0);
    let te64: Vec<f64> = te.iter().map(|&v| v as f64).collect();
    let ts64: Vec<f64> = ts.iter().map(|&v| v as f64).collect();

    let mut g = Graph::new();
    let b = ps.bind(&mut g)?;
    let out = forward(&mut g, &ps, &b, &cfg, &x, &t, &labels)?;
    let tev = g.leaf(te, bsz, cfg.pixels(), false)?;
    let tsv = g.leaf(ts, bsz, cfg.pixels(), false)?;
    let l1 = g.mse(out.eps, tev)?;
    let sigma = out.sigma_raw.ok_or_else(|| Error::Invalid("learn_sigma output missing".into()))?;
    let l2 = g.mse(sigma, tsv)?;
    let loss = g.add(l1, l2)?;
    g.backward(loss)?;

    let per_tensor = min_probes.div_ceil(ps.items.len()).max(1) + 1;
    let mut probe = Rng::new(seed + 5);
    let mut checked = 0usize;
    let mut worst_rel = 0f64;
    for ti in 0..ps.items.len() {
        let grads = g
            .grad(b.vars[ti])
            .ok_or_else(|| Error::Invalid(format!("no gradient for {}", ps.items[ti].name)))?
            .to_vec();
        let n = ps.items[ti].numel();
        for _ in 0..per_tensor.min(n) {
            let idx = probe.below(n);
            let p0 = ps.items[ti].data[idx];
            let h = 1e-3f32.max(p0.abs() * 1e-3);
            let (hp, hm) = (p0 + h, p0 - h);
            ps.items[ti].data[idx] = hp;
            let lp = ref_probe_loss(&ps, &cfg, &x, &t, &labels, &te64, &ts64)?;
            ps.items[ti].data[idx] = hm;
            let lm = ref_probe_loss(&ps, &cfg, &x, &t, &labels, &te64, &ts64)?;
            ps.items[ti].data[idx] = p0;
            let fd = (lp - lm) / (hp as f64 - hm as f64);
            let got = grads[idx] as f64;
            if !grad_gate(got, fd) {
                return Err(Error::Invalid(format!(
                    "model grad mismatch at {}[{idx}]: analytic {got} vs fd {fd}",
                    ps.items[ti].name
                )));
            }
            if fd.abs() >= 1e-4 {
                worst_rel = worst_rel.max((got - fd).abs() / fd.abs());
            }
            checked += 1;
        }
    }
    if checked < min_probes {
        return Err(Error::Invalid(format!("only {checked} parameters probed, need ≥ {min_probes}")));
    }
    Ok(format!("{checked} model parameters vs central FD (rel ≤1e-3), worst rel gap {worst_rel:.2e}"))
}

fn check_gradients() -> Result<String> {
    let a = check_wkv_gradients(411)?;
    let b = check_model_gradients(200, 421)?;
    Ok(format!("{a}; {b}"))
}

pub const TABLE1_REFS: &[(&str, f64)] =
    &[("S", 1.72), ("B", 3.32), ("M", 5.90), ("L", 19.65), ("H", 34.95)];

/// Config used for Table-1 comparisons: 32×32 latent, 4 channels, p=2
/// (J=256, the substitution the Eq.-13 examples use), adaLN-Zero, learned σ.
pub fn table1_config(preset: &str) -> Option<ModelConfig> {
    let (l, d) = ModelConfig::preset(preset)?;
    Some(ModelConfig {
        l,
        d,
        e: 4,
        p: 2,
        h: 32,
        w: 32,
        c: 4,
        cond_mode: CondMode::AdalnZero,
        num_classes: 1000,
        learn_sigma: true,
        t_steps: 1000,
        normalize_decay: true,
        skip: true,
    })
}

/// Criterion 3: Eq.-13 kernel counts are exact; per-preset totals are
/// computed and compared against the Table-1 references (deviation logged,
/// not asserted — the table's own params/Gflops columns are not mutually
/// consistent with any single fixed block shape).
pub fn check_flops() -> Result<String> {
    if wkv_flops(256, 768) != 2_555_904 {
        return Err(Error::Invalid(format!("wkv_flops(256,768) = {}, want 2,555,904", wkv_flops(256, 768))));
    }
    if wkv_flops(256, 384) != 1_277_952 {
        return Err(Error::Invalid(format!("wkv_flops(256,384) = {}, want 1,277,952", wkv_flops(256, 384))));
    }
    if wkv_flops(512, 768) != 2 * wkv_flops(256, 768) {
        return Err(Error::Invalid("wkv_flops must be linear in J".into()));
    }
    let mut parts = Vec::new();
    for &(name, reference) in TABLE1_REFS {
        let cfg = table1_config(name).expect("known preset");
        let total = model_flops(&cfg).total() as f64 / 1e9;
        parts.push(format!("{name} {total:.2} vs ref {reference:.2} ({:+.0}%)", (total / reference - 1.0) * 100.0));
    }
    Ok(format!("Eq.-13 kernel counts exact; preset Gflops (computed vs Table 1): {}", parts.join(", ")))
}

/// Criterion 5: schedule endpoints, monotonicity, and ᾱ_T confirmed by a
/// direct product before asserting its magnitude.
pub fn check_schedule() -> Result<String> {
    let sched = linear_schedule(1000, 1e-4, 2e-2)?;
    if (sched.beta_t(1) - 1e-4).abs() > 1e-15 || (sched.beta_t(1000) - 2e-2).abs() > 1e-15 {
        return Err(Error::Invalid(format!("β endpoints {} / {}", sched.beta_t(1), sched.beta_t(1000))));
    }
    for t in 2..=1000 {
        if sched.beta_t(t) <= sched.beta_t(t - 1) {
            return Err(Error::Invalid(format!("β not strictly increasing at t={t}")));
        }
        if sched.alpha_bar_t(t) >= sched.alpha_bar_t(t - 1) {
            return Err(Error::Invalid(format!("ᾱ not strictly decreasing at t={t}")));
        }
    }
    for t in 1..=1000 {
        let om = 1.0 - sched.alpha_bar_t(t);
        if !(0.0 < om && om < 1.0) {
            return Err(Error::Invalid(format!("1−ᾱ_{t} = {om} outside (0,1)")));
        }
    }
    let direct: f64 = (1..=1000).map(|t| 1.0 - sched.beta_t(t)).product();
    let stored = sched.alpha_bar_t(1000);
    if (direct - stored).abs() / direct > 1e-12 {
        return Err(Error::Invalid(format!("direct product {direct} vs stored ᾱ_1000 {stored}")));
    }
    if stored >= 1e-4 {
        return Err(Error::Invalid(format!("ᾱ_1000 = {stored} ≥ 1e-4")));
    }
    Ok(format!("β: 1e-4 → 2e-2 over T=1000, strictly monotone; ᾱ_1000 = {stored:.3e} < 1e-4 (direct product agrees)"))
}

/// Criterion 6: closed-form denoiser on a single-point dataset; 64 samples at
/// 250 respaced steps concentrate near x0*, and error does not grow with
/// more steps (checked at 10/50/250).
pub fn check_sampler_oracle() -> Result<String> {
    let sched = linear_schedule(1000, 1e-4, 2e-2)?;
    let pixels = 16usize;
    let x0: Vec<f32> = (0..pixels).map(|i| i as f32 / (pixels - 1) as f32 * 1.2 - 0.6).collect();
    let denoise = |x: &[f32], ts: &[usize], _labels: &[usize]| -> Result<(Vec<f32>, Option<Vec<f32>>)> {
        let mut eps = vec![0f32; x.len()];
        for (s, &t) in ts.iter().enumerate() {
            let ab = sched.alpha_bar_t(t);
            let (sa, so) = (ab.sqrt(), (1.0 - ab).sqrt());
            for p in 0..pixels {
                let i = s * pixels + p;
                eps[i] = ((x[i] as f64 - sa * x0[p] as f64) / so) as f32;
            }
        }
        Ok((eps, None))
    };
    let batch = 64usize;
    let mut mae = Vec::new();
    for (i, steps) in [10usize, 50, 250].iter().enumerate() {
        let sampler = SamplerConfig {
            num_steps: *steps,
            guidance_scale: 1.0,
            sigma_mode: SigmaMode::FixedSmall,
            seed: 600 + i as u64,
        };
        let out = sample_loop(&denoise, batch, pixels, None, 0, &sampler, &sched)?;
        let err: f64 = out
            .iter()
            .enumerate()
            .map(|(idx, &v)| (v as f64 - x0[idx % pixels] as f64).abs())
            .sum::<f64>()
            / out.len() as f64;
        mae.push(err);
    }
    if mae[2] >= 0.05 {
        return Err(Error::Invalid(format!("MAE at 250 steps = {:.4} ≥ 0.05", mae[2])));
    }
    if mae[2] > mae[0] || mae[2] > mae[1] || mae[1] > mae[0] {
        return Err(Error::Invalid(format!(
            "error not non-increasing in steps: 10→{:.4}, 50→{:.4}, 250→{:.4}",
            mae[0], mae[1], mae[2]
        )));
    }
    Ok(format!("64 samples: MAE 10→{:.4}, 50→{:.4}, 250→{:.4} (<0.05, non-increasing)", mae[0], mae[1], mae[2]))
}

/// Criterion 7: adaLN-Zero zero output, α=0 block identity, patchify and
/// checkpoint round-trips (all bitwise), and resume-equivalence ≤ 1e-6.
pub fn check_init_identities() -> Result<String> {
    // adaLN-Zero model output is bitwise zero at init
    let cfg = small_cfg(CondMode::AdalnZero, 3);
    let ps = init_backbone(&cfg, &mut Rng::new(301))?;
    let bsz = 2;
    let mut x = vec![0f32; bsz * cfg.pixels()];
    Rng::new(302).fill_uniform(&mut x, -1.0, 1.0);
    let mut g = Graph::new();
    let b = ps.bind(&mut g)?;
    let out = forward(&mut g, &ps, &b, &cfg, &x, &[5, 17], &[0, 3])?;
    if g.data(out.eps).iter().any(|v| v.to_bits() != 0) {
        return Err(Error::Invalid("adaLN-Zero ε̂ not bitwise zero at init".into()));
    }
    let sig = out.sigma_raw.expect("learn_sigma");
    if g.data(sig).iter().any(|v| v.to_bits() != 0) {
        return Err(Error::Invalid("adaLN-Zero σ head not bitwise zero at init".into()));
    }

    // α=0 gates make a randomly-weighted block a bitwise identity
    let (d, e) = (8usize, 2usize);
    let mut bps = ParamSet::new();
    init_block(&mut bps, 0, d, e, CondMode::AdalnZero, &mut Rng::new(303))?;
    randomize(&mut bps, 304);
    let ctx = BlockCtx { gh: 2, gw: 3, rows_per: 6, skip: 0, normalize_decay: true };
    let mut xb = vec![0f32; 2 * ctx.rows_per * d];
    Rng::new(305).fill_uniform(&mut xb, -2.0, 2.0);
    let mut gb = Graph::new();
    let bb = bps.bind(&mut gb)?;
    let bv = BlockVars::bind(&bps, &bb, 0)?;
    let xv = gb.leaf(xb.clone(), 2 * ctx.rows_per, d, false)?;
    let mut sbuf = vec![0f32; 2 * d];
    Rng::new(306).fill_uniform(&mut sbuf, -1.0, 1.0);
    let sv = gb.leaf(sbuf.clone(), 2, d, false)?;
    let shv = gb.leaf(sbuf, 2, d, false)?;
    let av = gb.leaf(vec![0f32; 2 * d], 2, d, false)?;
    let m = Modulation { s1: sv, b1: shv, a1: Some(av), s2: sv, b2: shv, a2: Some(av) };
    let y = block_forward(&mut gb, xv, &bv, &ctx, Some(&m))?;
    if gb.data(y).iter().zip(&xb).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Invalid("α=0 block is not a bitwise identity".into()));
    }

    // patchify/unpatchify round-trip
    let (c, h, w, p) = (3usize, 8usize, 6usize, 2usize);
    let mut img = vec![0f32; c * h * w];
    Rng::new(307).fill_uniform(&mut img, -1.0, 1.0);
    let back = unpatchify(&patchify(&img, c, h, w, p), p, h / p, w / p, c);
    if back.iter().zip(&img).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Invalid("patchify round-trip not bitwise".into()));
    }

    // checkpoint round-trip: params bitwise, files byte-identical
    let dir = tempfile::tempdir()?;
    let mut ck = Checkpoint::default();
    ck.header_set("step", "7");
    ck.model = ps.clone();
    let p1 = dir.path().join("a.drwk");
    let p2 = dir.path().join("b.drwk");
    checkpoint_save(&p1, &ck)?;
    let loaded = checkpoint_load(&p1)?;
    for (a, b) in loaded.model.items.iter().zip(&ps.items) {
        if a.name != b.name || a.data.iter().zip(&b.data).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(Error::Invalid(format!("checkpoint round-trip altered {}", b.name)));
        }
    }
    checkpoint_save(&p2, &loaded)?;
    if std::fs::read(&p1)? != std::fs::read(&p2)? {
        return Err(Error::Invalid("checkpoint save→load→save not byte-identical".into()));
    }

    // resume-equivalence on a tiny run
    let mcfg = small_cfg(CondMode::AdalnZero, 2);
    let tcfg = TrainConfig { steps: 6, batch: 4, seed: 308, ..Default::default() };
    let data = synth_two_blobs(16, 4, 4, 309)?;
    let d1 = tempfile::tempdir()?;
    let straight = train_loop(&mcfg, &tcfg, &data, d1.path(), init_state(&mcfg, &tcfg)?, None)?;
    let d2 = tempfile::tempdir()?;
    let half = TrainConfig { steps: 3, ..tcfg.clone() };
    let first = train_loop(&mcfg, &half, &data, d2.path(), init_state(&mcfg, &half)?, None)?;
    let resumed = resume_state(checkpoint_load(&first.checkpoint_path)?, &mcfg)?;
    let second = train_loop(&mcfg, &tcfg, &data, d2.path(), resumed, None)?;
    let gap = (straight.final_loss - second.final_loss).abs();
    if gap > 1e-6 {
        return Err(Error::Invalid(format!("resume-equivalence gap {gap:.3e} > 1e-6")));
    }
    Ok(format!(
        "adaLN-Zero zero output, α=0 identity, patchify and checkpoint round-trips all bitwise; resume gap {gap:.1e} ≤ 1e-6"
    ))
}

/// Data-module oracles: two-blob determinism and balance, the CIFAR fixture,
/// the pixmap golden bytes, and the flip helper.
pub fn check_data_roundtrips() -> Result<String> {
    let a = synth_two_blobs(1000, 8, 8, 5)?;
    let b = synth_two_blobs(1000, 8, 8, 5)?;
    if a.images.iter().zip(&b.images).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err(Error::Invalid("two_blobs not deterministic per seed".into()));
    }
    let labels = a.labels.as_ref().expect("labeled");
    let zeros = labels.iter().filter(|&&c| c == 0).count();
    if zeros != 500 {
        return Err(Error::Invalid(format!("two_blobs class balance {zeros}/500")));
    }
    a.check()?;

    let dir = tempfile::tempdir()?;
    let f = dir.path().join("data_batch_1.bin");
    let mut bytes = vec![3u8];
    bytes.extend(vec![0u8; 3072]);
    bytes.push(9);
    bytes.extend(vec![255u8; 3072]);
    std::fs::write(&f, &bytes)?;
    let ds = crate::data::cifar10_load(&f)?;
    if ds.n != 2 || ds.labels.as_deref() != Some(&[3, 9][..]) {
        return Err(Error::Invalid("CIFAR fixture mis-parsed".into()));
    }
    if ds.image(0).iter().any(|&v| v != -1.0) || ds.image(1).iter().any(|&v| (v - 1.0).abs() > 1e-6) {
        return Err(Error::Invalid("CIFAR pixel mapping wrong at endpoints".into()));
    }
    std::fs::write(&f, vec![0u8; 3072])?;
    if crate::data::cifar10_load(&f).is_ok() {
        return Err(Error::Invalid("CIFAR loader accepted a truncated file".into()));
    }

    let pix = dir.path().join("x.pgm");
    image_write(&pix, &[-1.0, 1.0, 0.0, -0.5], 1, 2, 2)?;
    let mut want = b"P5\n2 2\n255\n".to_vec();
    want.extend_from_slice(&[0u8, 255, 128, 64]);
    if std::fs::read(&pix)? != want {
        return Err(Error::Invalid("pixmap golden bytes differ".into()));
    }

    let mut row = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
    hflip(&mut row, 1, 2, 3);
    if row != [3.0, 2.0, 1.0, 6.0, 5.0, 4.0] {
        return Err(Error::Invalid("hflip broken".into()));
    }
    Ok("two-blob determinism/balance, CIFAR fixture + rejection, pixmap golden bytes, hflip".into())
}

// ─── Complexity benchmark ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub j: usize,
    pub scan_ns: u128,
    pub oracle_ns: u128,
}

/// Per-call nanoseconds: one timed run may loop the closure enough times to
/// swamp timer noise; the median over `repeats` such runs is reported.
fn time_call(mut f: impl FnMut(), repeats: usize) -> u128 {
    let t0 = Instant::now();
    f();
    let once = t0.elapsed().as_nanos().max(1);
    let iters = (5_000_000 / once).clamp(1, 10_000) as usize;
    let mut runs: Vec<u128> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..iters {
                f();
            }
            t.elapsed().as_nanos() / iters as u128
        })
        .collect();
    runs.sort_unstable();
    runs[runs.len() / 2]
}

/// Time the linear scan against the quadratic oracle across sequence lengths
/// (single worker: both kernels are single-threaded by construction).
pub fn bench_wkv(j_list: &[usize], d: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if j_list.is_empty() || j_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("J list must be ascending and non-empty".into()));
    }
    let mut rng = Rng::new(777);
    let mut rows = Vec::new();
    for &j in j_list {
        let (k, v, params) = rand_kernel_case(&mut rng, j, d, 1.0);
        let scan_ns = time_call(
            || {
                std::hint::black_box(wkv_bidirectional(&k, &v, &params, j, d).expect("scan"));
            },
            repeats,
        );
        let oracle_ns = time_call(
            || {
                std::hint::black_box(wkv_oracle(&k, &v, &params, j, d).expect("oracle"));
            },
            repeats,
        );
        rows.push(BenchRow { j, scan_ns, oracle_ns });
    }
    Ok(rows)
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (mx / n, my / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(x, y)| {
        let dx = x.ln() - mx;
        (num + dx * (y.ln() - my), den + dx * dx)
    });
    num / den
}

/// Criterion 4: fitted log-log slopes — scan < 1.4, oracle > 1.7.
pub fn check_complexity(j_list: &[usize], d: usize, repeats: usize, assert_slopes: bool) -> Result<String> {
    let rows = bench_wkv(j_list, d, repeats)?;
    let scan: Vec<(f64, f64)> = rows.iter().map(|r| (r.j as f64, r.scan_ns as f64)).collect();
    let oracle: Vec<(f64, f64)> = rows.iter().map(|r| (r.j as f64, r.oracle_ns as f64)).collect();
    let s_scan = loglog_slope(&scan);
    let s_oracle = loglog_slope(&oracle);
    let detail = format!(
        "slopes over J∈{j_list:?} (D={d}): scan {s_scan:.3} (<1.4), oracle {s_oracle:.3} (>1.7); ns/call {:?}",
        rows.iter().map(|r| (r.j, r.scan_ns, r.oracle_ns)).collect::<Vec<_>>()
    );
    if assert_slopes && (s_scan >= 1.4 || s_oracle <= 1.7) {
        return Err(Error::Invalid(detail));
    }
    Ok(detail)
}
