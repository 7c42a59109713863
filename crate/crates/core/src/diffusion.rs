//! DDPM machinery: linear schedule, forward corruption, the training loss
//! (MSE + learned-variance VLB), the ancestral sampler with respacing and
//! classifier-free guidance, and EMA.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::{Graph, Var};

/// All arrays are indexed by t−1 for t ∈ 1..=T and computed in f64.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
    /// ᾱ_{t−1}, defined as 1 at t=1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 { 1.0 } else { self.alpha_bar[t - 2] }
    }
    /// β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t — zero at t=1.
    pub fn posterior_var(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar_t(t)) * self.beta_t(t)
    }
    /// β̃ with the degenerate t=1 value floored to β̃_2, so its log exists.
    pub fn posterior_var_clipped(&self, t: usize) -> f64 {
        if t == 1 { self.posterior_var(2.min(self.t_steps)) } else { self.posterior_var(t) }
    }
    pub fn check(&self) -> Result<()> {
        let t = self.t_steps;
        if self.beta.len() != t || self.alpha.len() != t || self.alpha_bar.len() != t {
            return Err(Error::Invalid("schedule array length mismatch".into()));
        }
        for i in 0..t {
            if !(self.beta[i] > 0.0 && self.beta[i] < 1.0) {
                return Err(Error::Invalid(format!("beta[{}]={} out of (0,1)", i + 1, self.beta[i])));
            }
            if i > 0 && self.alpha_bar[i] >= self.alpha_bar[i - 1] {
                return Err(Error::Invalid(format!("alpha_bar not strictly decreasing at t={}", i + 1)));
            }
            if !(self.alpha_bar[i] > 0.0 && self.alpha_bar[i] < 1.0) {
                return Err(Error::Invalid(format!("alpha_bar[{}] out of (0,1)", i + 1)));
            }
        }
        Ok(())
    }
}

/// β_t linearly spaced inclusive from `beta_start` (t=1) to `beta_end` (t=T).
pub fn linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::Invalid("T must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!("bad beta bounds [{beta_start}, {beta_end}]")));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = alpha.clone();
    for i in 1..t_steps {
        alpha_bar[i] = alpha_bar[i - 1] * alpha[i];
    }
    let s = NoiseSchedule { t_steps, beta, alpha, alpha_bar };
    s.check()?;
    Ok(s)
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps, elementwise over a batch sharing one t.
pub fn q_sample(x0: &[f32], t: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Vec<f32>> {
    if t < 1 || t > sched.t_steps {
        return Err(Error::Invalid(format!("t={t} outside 1..={}", sched.t_steps)));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample", "x0/eps length mismatch"));
    }
    let sa = sched.alpha_bar_t(t).sqrt();
    let sb = (1.0 - sched.alpha_bar_t(t)).sqrt();
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (sa * x as f64 + sb * e as f64) as f32).collect())
}

/// Per-sample stochastic draws for one training step, fixed up front so loss
/// evaluation is a pure function of (params, draws).
#[derive(Debug, Clone)]
pub struct TrainDraws {
    pub t: Vec<usize>,
    pub eps: Vec<f32>,
    /// label kept (false ⇒ replaced by the null class)
    pub keep: Vec<bool>,
}

/// Draw order: per-sample t, then per-sample keep flags, then all eps.
pub fn draw_batch(rng: &mut Rng, batch: usize, pixels: usize, t_steps: usize, p_drop: f64) -> TrainDraws {
    let t: Vec<usize> = (0..batch).map(|_| rng.below(t_steps) + 1).collect();
    let keep: Vec<bool> = (0..batch).map(|_| !rng.coin(p_drop)).collect();
    let mut eps = vec![0f32; batch * pixels];
    rng.fill_normal(&mut eps);
    TrainDraws { t, eps, keep }
}

pub struct LossParts {
    pub loss: Var,
    pub mse: Var,
    pub vlb: Option<Var>,
    /// labels actually fed to the model (after null-drop)
    pub labels: Vec<usize>,
    pub x_t: Vec<f32>,
}

fn expand_per_sample(vals: &[f64], pixels: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(vals.len() * pixels);
    for &v in vals {
        out.extend(std::iter::repeat_n(v as f32, pixels));
    }
    out
}

/// Assemble loss = MSE(ε̂, ε) [+ VLB on the learned variance, ε̂ detached].
/// Split out from `training_loss` so oracle predictions can be fed directly.
pub fn assemble_loss(g: &mut Graph, eps_hat: Var, sigma_raw: Option<Var>, x0: &[f32], x_t: &[f32], t: &[usize], eps: &[f32], sched: &NoiseSchedule) -> Result<LossParts> {
    let bsz = t.len();
    let pixels = x0.len() / bsz;
    if g.shape(eps_hat) != (bsz, pixels) {
        return Err(Error::shape("assemble_loss", "eps_hat shape vs batch"));
    }
    let eps_leaf = g.leaf(eps.to_vec(), bsz, pixels, false)?;
    let mse = g.mse(eps_hat, eps_leaf)?;
    let vlb = match sigma_raw {
        None => None,
        Some(raw) => {
            // KL( q(x_{t−1}|x_t,x0) ‖ N(μ_θ, Σ_θ) ) with Σ_θ interpolated
            // between β and β̃ in log space and ε̂ detached.
            let logb: Vec<f64> = t.iter().map(|&ti| sched.beta_t(ti).ln()).collect();
            let logbt: Vec<f64> = t.iter().map(|&ti| sched.posterior_var_clipped(ti).ln()).collect();
            let btil: Vec<f64> = t.iter().map(|&ti| sched.posterior_var_clipped(ti)).collect();
            let c_x0: Vec<f64> = t
                .iter()
                .map(|&ti| sched.alpha_bar_prev(ti).sqrt() * sched.beta_t(ti) / (1.0 - sched.alpha_bar_t(ti)))
                .collect();
            let c_xt: Vec<f64> = t
                .iter()
                .map(|&ti| sched.alpha_t(ti).sqrt() * (1.0 - sched.alpha_bar_prev(ti)) / (1.0 - sched.alpha_bar_t(ti)))
                .collect();
            let c_rec: Vec<f64> = t.iter().map(|&ti| 1.0 / sched.alpha_t(ti).sqrt()).collect();
            let c_eps: Vec<f64> = t
                .iter()
                .map(|&ti| sched.beta_t(ti) / ((1.0 - sched.alpha_bar_t(ti)).sqrt() * sched.alpha_t(ti).sqrt()))
                .collect();

            let lf = |g: &mut Graph, v: &[f64]| g.leaf(expand_per_sample(v, pixels), bsz, pixels, false);
            let logb_l = lf(g, &logb)?;
            let logbt_l = lf(g, &logbt)?;
            let btil_l = lf(g, &btil)?;
            let cx0_l = lf(g, &c_x0)?;
            let cxt_l = lf(g, &c_xt)?;
            let crec_l = lf(g, &c_rec)?;
            let ceps_l = lf(g, &c_eps)?;
            let x0_l = g.leaf(x0.to_vec(), bsz, pixels, false)?;
            let xt_l = g.leaf(x_t.to_vec(), bsz, pixels, false)?;

            // log Σ = log β̃ + v·(log β − log β̃), v = (tanh(raw)+1)/2
            let th = g.tanh(raw)?;
            let v = g.add_const(th, 1.0)?;
            let v = g.scale(v, 0.5)?;
            let spread = g.sub(logb_l, logbt_l)?;
            let vs = g.mul(v, spread)?;
            let log_sigma = g.add(logbt_l, vs)?;

            // μ̃ = c_x0·x0 + c_xt·x_t ; μ_θ = c_rec·x_t − c_eps·detach(ε̂)
            let mu_q1 = g.mul(cx0_l, x0_l)?;
            let mu_q2 = g.mul(cxt_l, xt_l)?;
            let mu_q = g.add(mu_q1, mu_q2)?;
            let det = g.detach(eps_hat);
            let mu_p1 = g.mul(crec_l, xt_l)?;
            let mu_p2 = g.mul(ceps_l, det)?;
            let mu_p = g.sub(mu_p1, mu_p2)?;
            let dmu = g.sub(mu_q, mu_p)?;
            let dmu2 = g.mul(dmu, dmu)?;

            // KL = ½[(logΣ − logβ̃) + (β̃ + Δμ²)/Σ − 1]
            let t1 = g.sub(log_sigma, logbt_l)?;
            let neg_ls = g.scale(log_sigma, -1.0)?;
            let inv_sigma = g.exp(neg_ls)?;
            let num = g.add(btil_l, dmu2)?;
            let t2 = g.mul(num, inv_sigma)?;
            let s = g.add(t1, t2)?;
            let s = g.add_const(s, -1.0)?;
            let kl = g.scale(s, 0.5)?;
            Some(g.mean_all(kl)?)
        }
    };
    let loss = match vlb {
        Some(v) => g.add(mse, v)?,
        None => mse,
    };
    Ok(LossParts { loss, mse, vlb, labels: Vec::new(), x_t: x_t.to_vec() })
}

/// Build the full training-loss graph for one batch: corrupt, forward,
/// assemble. Labels are replaced by the null class where `keep` is false.
pub fn training_loss(g: &mut Graph, ps: &ParamSet, bound: &crate::params::Bound, cfg: &crate::backbone::ModelConfig, sched: &NoiseSchedule, x0: &[f32], labels: &[usize], draws: &TrainDraws) -> Result<LossParts> {
    let bsz = draws.t.len();
    let pixels = cfg.pixels();
    if x0.len() != bsz * pixels {
        return Err(Error::shape("training_loss", "x0 length vs batch"));
    }
    if sched.t_steps != cfg.t_steps {
        return Err(Error::Config("schedule length differs from model T".into()));
    }
    let mut x_t = vec![0f32; bsz * pixels];
    for s in 0..bsz {
        let r = s * pixels..(s + 1) * pixels;
        let xt = q_sample(&x0[r.clone()], draws.t[s], &draws.eps[r.clone()], sched)?;
        x_t[r].copy_from_slice(&xt);
    }
    let fed: Vec<usize> = if cfg.num_classes > 0 {
        if labels.len() != bsz {
            return Err(Error::Invalid(format!("{} labels for batch {bsz}", labels.len())));
        }
        labels
            .iter()
            .zip(&draws.keep)
            .map(|(&c, &k)| if k { c } else { cfg.num_classes })
            .collect()
    } else {
        Vec::new()
    };
    let out = crate::backbone::forward(g, ps, bound, cfg, &x_t, &draws.t, &fed)?;
    let mut parts = assemble_loss(g, out.eps, out.sigma_raw, x0, &x_t, &draws.t, &draws.eps, sched)?;
    parts.labels = fed;
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    FixedSmall,
    FixedLarge,
    Learned,
}

impl SigmaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed_small" => Ok(SigmaMode::FixedSmall),
            "fixed_large" => Ok(SigmaMode::FixedLarge),
            "learned" => Ok(SigmaMode::Learned),
            _ => Err(Error::Config(format!("unknown sigma_mode {s}"))),
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            SigmaMode::FixedSmall => "fixed_small",
            SigmaMode::FixedLarge => "fixed_large",
            SigmaMode::Learned => "learned",
        }
    }
}

/// One ancestral step, Eq. 2: x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z.
/// `sigma_raw` is required (and used) only in learned mode.
pub fn p_sample_step(x_t: &[f32], t: usize, eps_hat: &[f32], sigma_raw: Option<&[f32]>, z: &[f32], sched: &NoiseSchedule, mode: SigmaMode) -> Result<Vec<f32>> {
    if t < 1 || t > sched.t_steps {
        return Err(Error::Invalid(format!("t={t} outside 1..={}", sched.t_steps)));
    }
    if x_t.len() != eps_hat.len() || x_t.len() != z.len() {
        return Err(Error::shape("p_sample_step", "length mismatch"));
    }
    let a = sched.alpha_t(t);
    let ab = sched.alpha_bar_t(t);
    let c_eps = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sa = 1.0 / a.sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    match mode {
        SigmaMode::Learned => {
            let raw = sigma_raw.ok_or_else(|| Error::Invalid("learned sigma needs sigma_raw".into()))?;
            if raw.len() != x_t.len() {
                return Err(Error::shape("p_sample_step", "sigma_raw length"));
            }
            let lb = sched.beta_t(t).ln();
            let lbt = sched.posterior_var_clipped(t).ln();
            for i in 0..x_t.len() {
                let v = ((raw[i] as f64).tanh() + 1.0) * 0.5;
                let sigma = (0.5 * (v * lb + (1.0 - v) * lbt)).exp();
                let mean = inv_sa * (x_t[i] as f64 - c_eps * eps_hat[i] as f64);
                out.push((mean + sigma * z[i] as f64) as f32);
            }
        }
        _ => {
            let var = match mode {
                SigmaMode::FixedSmall => sched.posterior_var_clipped(t),
                _ => sched.beta_t(t),
            };
            let sigma = var.sqrt();
            for i in 0..x_t.len() {
                let mean = inv_sa * (x_t[i] as f64 - c_eps * eps_hat[i] as f64);
                out.push((mean + sigma * z[i] as f64) as f32);
            }
        }
    }
    Ok(out)
}

/// ε ← ε_u + s·(ε_c − ε_u), elementwise.
pub fn cfg_combine(eps_cond: &[f32], eps_uncond: &[f32], s: f32) -> Vec<f32> {
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| u + s * (c - u))
        .collect()
}

/// Uniform-stride subsequence t_i = ⌊(i+1)·T/n⌋ (ascending, ends at T) plus
/// the rescaled schedule with ᾱ̂_i = ᾱ_{t_i} exactly. num_steps == T returns
/// the original schedule verbatim.
pub fn respace(sched: &NoiseSchedule, num_steps: usize) -> Result<(Vec<usize>, NoiseSchedule)> {
    let t = sched.t_steps;
    if num_steps < 1 || num_steps > t {
        return Err(Error::Invalid(format!("num_steps {num_steps} outside 1..={t}")));
    }
    if num_steps == t {
        return Ok(((1..=t).collect(), sched.clone()));
    }
    let ts: Vec<usize> = (0..num_steps).map(|i| (i + 1) * t / num_steps).collect();
    let mut beta = Vec::with_capacity(num_steps);
    let mut prev_ab = 1.0f64;
    for &ti in &ts {
        let ab = sched.alpha_bar_t(ti);
        beta.push(1.0 - ab / prev_ab);
        prev_ab = ab;
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = ts.iter().map(|&ti| sched.alpha_bar_t(ti)).collect();
    let sub = NoiseSchedule { t_steps: num_steps, beta, alpha, alpha_bar };
    sub.check()?;
    Ok((ts, sub))
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f32,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
}

/// Model closure: (x_t, original t per sample, labels) → (ε̂, raw σ logits).
pub type DenoiseFn<'a> = dyn Fn(&[f32], &[usize], &[usize]) -> Result<(Vec<f32>, Option<Vec<f32>>)> + 'a;

/// Ancestral sampling from x_T ~ N(0,I) down the respaced schedule; z = 0 at
/// the final step; output clamped to [−1,1]. `labels`, when present, selects
/// class-conditional sampling (guidance ≠ 1 adds the null-label pass).
pub fn sample_loop(model: &DenoiseFn, batch: usize, pixels: usize, labels: Option<&[usize]>, null_label: usize, sampler: &SamplerConfig, sched: &NoiseSchedule) -> Result<Vec<f32>> {
    let (ts, sub) = respace(sched, sampler.num_steps)?;
    let mut rng = Rng::new(sampler.seed);
    let mut x = vec![0f32; batch * pixels];
    rng.fill_normal(&mut x);
    let mut z = vec![0f32; batch * pixels];
    for i in (0..sub.t_steps).rev() {
        let t_orig = vec![ts[i]; batch];
        let (eps, raw) = match labels {
            None => model(&x, &t_orig, &[])?,
            Some(lab) => {
                let (ec, raw_c) = model(&x, &t_orig, lab)?;
                if sampler.guidance_scale == 1.0 {
                    (ec, raw_c)
                } else {
                    let null = vec![null_label; batch];
                    let (eu, _) = model(&x, &t_orig, &null)?;
                    // guided ε, conditional-pass variance (DiT convention)
                    (cfg_combine(&ec, &eu, sampler.guidance_scale), raw_c)
                }
            }
        };
        if i == 0 {
            z.fill(0.0);
        } else {
            rng.fill_normal(&mut z);
        }
        x = p_sample_step(&x, i + 1, &eps, raw.as_deref(), &z, &sub, sampler.sigma_mode)?;
    }
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

/// shadow ← d·shadow + (1−d)·param for every tensor.
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, d: f32) -> Result<()> {
    if shadow.items.len() != params.items.len() {
        return Err(Error::shape("ema_update", "tensor count mismatch"));
    }
    for (s, p) in shadow.items.iter_mut().zip(&params.items) {
        if s.rows != p.rows || s.cols != p.cols || s.name != p.name {
            return Err(Error::shape("ema_update", format!("tensor {} vs {}", s.name, p.name)));
        }
        for (sv, &pv) in s.data.iter_mut().zip(&p.data) {
            *sv = d * *sv + (1.0 - d) * pv;
        }
    }
    Ok(())
}
