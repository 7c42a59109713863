//! The Bi-WKV attention kernel: stable streaming scans, the quadratic oracle,
//! an O(J·D) analytic backward, and the Eq.-style FLOPs accountant.
//!
//! Per channel d the bidirectional form is
//!
//!   h_t = ( Σ_{i<t} e^{k_i−(t−1−i)ŵ} v_i + Σ_{i>t} e^{k_i−(i−1−t)ŵ} v_i
//!           + e^{u+k_t} v_t )  /  (same sums with v → 1)
//!
//! with ŵ = w (or w/J under `normalize_decay`), w ≥ 0. The causal form keeps
//! only i<t plus the bonus term. Scans carry the state (a, b, p) where p is
//! the running max of absorbed exponents, so no intermediate exp can
//! overflow; p starts at −1e38 (−∞), which is what makes h₁ = v₁ exact at
//! J=1. Internally f64, in/out f32.
//!
//! The backward pass never needs log-space: its six decayed scans only ever
//! multiply by e^{−ŵ} ≤ 1, and the remaining exponentials stay below
//! e^{|k|+|u|+|m|} ≲ e^{240} for the documented |k|,|u| ≤ 80 domain — far
//! inside f64 range.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicBool, Ordering};

/// Flipped by `--inject-fault wkv-sign`: the scan (not the oracle) negates the
/// bonus exponent, which the kernel-oracle suite must catch.
static FAULT_WKV_SIGN: AtomicBool = AtomicBool::new(false);

pub fn set_fault_wkv_sign(on: bool) {
    FAULT_WKV_SIGN.store(on, Ordering::Relaxed);
}

fn bonus_sign() -> f64 {
    if FAULT_WKV_SIGN.load(Ordering::Relaxed) {
        -1.0
    } else {
        1.0
    }
}

pub const P_NEG_INF: f64 = -1e38;

#[derive(Debug, Clone)]
pub struct WkvParams {
    /// Effective per-channel decay, required ≥ 0 (trained blocks keep an
    /// unconstrained parameter and exp-map it before calling the kernel).
    pub w: Vec<f32>,
    /// Per-channel current-token bonus.
    pub u: Vec<f32>,
    /// Divide the decay exponent by J so receptive width is resolution-free.
    pub normalize_decay: bool,
}

impl WkvParams {
    pub fn zeros(d: usize) -> Self {
        WkvParams { w: vec![0.0; d], u: vec![0.0; d], normalize_decay: false }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.w.len() != d || self.u.len() != d {
            return Err(Error::shape("wkv", format!("params sized {}/{} for D={}", self.w.len(), self.u.len(), d)));
        }
        if self.w.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Invalid("wkv: decay w must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    fn effective_decay(&self, j: usize) -> Vec<f64> {
        let scale = if self.normalize_decay { 1.0 / j as f64 } else { 1.0 };
        self.w.iter().map(|&w| w as f64 * scale).collect()
    }
}

fn check_shapes(k: &[f32], v: &[f32], j: usize, d: usize) -> Result<()> {
    if j == 0 {
        return Err(Error::Invalid("wkv: J must be ≥ 1".into()));
    }
    if k.len() != j * d || v.len() != j * d {
        return Err(Error::shape("wkv", format!("k/v sized {}/{} for J×D = {}×{}", k.len(), v.len(), j, d)));
    }
    Ok(())
}

/// One absorption step of the stable scan state, vectorized over channels:
/// a' = a·e^{(p−ŵ)−p'} + v·e^{k−p'}, b' likewise, p' = max(p−ŵ, k).
#[inline]
fn absorb(a: &mut [f64], b: &mut [f64], p: &mut [f64], k_row: &[f32], v_row: &[f32], wh: &[f64]) {
    for c in 0..a.len() {
        let kd = k_row[c] as f64;
        let decayed = p[c] - wh[c];
        let pn = decayed.max(kd);
        let ea = (decayed - pn).exp();
        let ek = (kd - pn).exp();
        a[c] = a[c] * ea + v_row[c] as f64 * ek;
        b[c] = b[c] * ea + ek;
        p[c] = pn;
    }
}

struct ScanSides {
    /// Per-token pre-absorption forward state (covers i < t), length J·D each.
    fa: Vec<f64>,
    fb: Vec<f64>,
    fp: Vec<f64>,
    /// Per-token backward state (covers i > t); empty in causal mode.
    ba: Vec<f64>,
    bb: Vec<f64>,
    bp: Vec<f64>,
}

fn run_scans(k: &[f32], v: &[f32], wh: &[f64], j: usize, d: usize, bidirectional: bool) -> ScanSides {
    let mut fa = vec![0f64; j * d];
    let mut fb = vec![0f64; j * d];
    let mut fp = vec![P_NEG_INF; j * d];
    let (mut a, mut b, mut p) = (vec![0f64; d], vec![0f64; d], vec![P_NEG_INF; d]);
    for t in 0..j {
        fa[t * d..(t + 1) * d].copy_from_slice(&a);
        fb[t * d..(t + 1) * d].copy_from_slice(&b);
        fp[t * d..(t + 1) * d].copy_from_slice(&p);
        absorb(&mut a, &mut b, &mut p, &k[t * d..(t + 1) * d], &v[t * d..(t + 1) * d], wh);
    }
    let (mut ba, mut bb, mut bp) = (Vec::new(), Vec::new(), Vec::new());
    if bidirectional {
        ba = vec![0f64; j * d];
        bb = vec![0f64; j * d];
        bp = vec![P_NEG_INF; j * d];
        let (mut a, mut b, mut p) = (vec![0f64; d], vec![0f64; d], vec![P_NEG_INF; d]);
        for t in (0..j).rev() {
            ba[t * d..(t + 1) * d].copy_from_slice(&a);
            bb[t * d..(t + 1) * d].copy_from_slice(&b);
            bp[t * d..(t + 1) * d].copy_from_slice(&p);
            absorb(&mut a, &mut b, &mut p, &k[t * d..(t + 1) * d], &v[t * d..(t + 1) * d], wh);
        }
    }
    ScanSides { fa, fb, fp, ba, bb, bp }
}

fn wkv_scan(k: &[f32], v: &[f32], params: &WkvParams, j: usize, d: usize, bidirectional: bool) -> Result<Vec<f32>> {
    check_shapes(k, v, j, d)?;
    params.validate(d)?;
    let wh = params.effective_decay(j);
    let sides = run_scans(k, v, &wh, j, d, bidirectional);
    let sign = bonus_sign();
    let mut h = vec![0f32; j * d];
    for t in 0..j {
        for c in 0..d {
            let i = t * d + c;
            let bonus = sign * (params.u[c] as f64 + k[i] as f64);
            let mut m = sides.fp[i].max(bonus);
            if bidirectional {
                m = m.max(sides.bp[i]);
            }
            let eb = (bonus - m).exp();
            let ef = (sides.fp[i] - m).exp();
            let mut num = sides.fa[i] * ef + v[i] as f64 * eb;
            let mut den = sides.fb[i] * ef + eb;
            if bidirectional {
                let er = (sides.bp[i] - m).exp();
                num += sides.ba[i] * er;
                den += sides.bb[i] * er;
            }
            if den == 0.0 {
                return Err(Error::NonFinite { op: "wkv" });
            }
            h[i] = (num / den) as f32;
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "wkv" });
    }
    Ok(h)
}

/// Causal WKV: each token aggregates strictly earlier tokens plus itself.
pub fn wkv_causal(k: &[f32], v: &[f32], params: &WkvParams, j: usize, d: usize) -> Result<Vec<f32>> {
    wkv_scan(k, v, params, j, d, false)
}

/// Bidirectional WKV: every token aggregates the whole sequence, O(J·D).
pub fn wkv_bidirectional(k: &[f32], v: &[f32], params: &WkvParams, j: usize, d: usize) -> Result<Vec<f32>> {
    wkv_scan(k, v, params, j, d, true)
}

// ─── Quadratic oracle ───────────────────────────────────────────────────────

/// f64 double-loop evaluation of the closed form; the independent
/// verification path for the scans. Exponents are shifted per output row by
/// their own max, so any |k| the caller throws at it stays finite.
pub fn wkv_oracle_f64(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    normalize_decay: bool,
    causal: bool,
    j: usize,
    d: usize,
) -> Vec<f64> {
    assert!(j >= 1 && k.len() == j * d && v.len() == j * d);
    let scale = if normalize_decay { 1.0 / j as f64 } else { 1.0 };
    let mut h = vec![0f64; j * d];
    for t in 0..j {
        for c in 0..d {
            let wh = w[c] * scale;
            let hi = if causal { t + 1 } else { j };
            let mut m = f64::NEG_INFINITY;
            for i in 0..hi {
                let e = if i == t {
                    u[c] + k[t * d + c]
                } else {
                    let dist = if i < t { t - i } else { i - t } as f64;
                    k[i * d + c] - (dist - 1.0) * wh
                };
                m = m.max(e);
            }
            let (mut num, mut den) = (0f64, 0f64);
            for i in 0..hi {
                let e = if i == t {
                    u[c] + k[t * d + c]
                } else {
                    let dist = if i < t { t - i } else { i - t } as f64;
                    k[i * d + c] - (dist - 1.0) * wh
                };
                let wgt = (e - m).exp();
                num += wgt * v[i * d + c];
                den += wgt;
            }
            h[t * d + c] = num / den;
        }
    }
    h
}

fn oracle_f32(k: &[f32], v: &[f32], params: &WkvParams, j: usize, d: usize, causal: bool) -> Result<Vec<f32>> {
    check_shapes(k, v, j, d)?;
    params.validate(d)?;
    if j > 4096 {
        return Err(Error::Invalid("wkv_oracle: guarded to J ≤ 4096 (O(J²) cost)".into()));
    }
    let kf: Vec<f64> = k.iter().map(|&x| x as f64).collect();
    let vf: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let wf: Vec<f64> = params.w.iter().map(|&x| x as f64).collect();
    let uf: Vec<f64> = params.u.iter().map(|&x| x as f64).collect();
    let h = wkv_oracle_f64(&kf, &vf, &wf, &uf, params.normalize_decay, causal, j, d);
    Ok(h.into_iter().map(|x| x as f32).collect())
}

/// Brute-force O(J²·D) bidirectional reference.
pub fn wkv_oracle(k: &[f32], v: &[f32], params: &WkvParams, j: usize, d: usize) -> Result<Vec<f32>> {
    oracle_f32(k, v, params, j, d, false)
}

/// Brute-force causal reference.
pub fn wkv_oracle_causal(k: &[f32], v: &[f32], params: &WkvParams, j: usize, d: usize) -> Result<Vec<f32>> {
    oracle_f32(k, v, params, j, d, true)
}

// ─── Backward ───────────────────────────────────────────────────────────────

/// Adjoints of the (bidirectional or causal) kernel in O(J·D).
///
/// With G_t = g_t/D_t and Ĥ_t = G_t·h_t, the chain rule gives
///   dv_j = e^{k_j}·(S⁺_j + S⁻_j) + G_j e^{u+k_j}
///   dk_j = e^{k_j}·(v_j(S⁺_j+S⁻_j) − (Ŝ⁺_j+Ŝ⁻_j)) + (G_j v_j − Ĥ_j) e^{u+k_j}
///   du   = Σ_j (G_j v_j − Ĥ_j) e^{u+k_j}
///   dŵ   = −Σ_j e^{k_j}·(v_j(U⁺_j+U⁻_j) − (Û⁺_j+Û⁻_j))
/// where S⁺_j = Σ_{t>j} G_t e^{−(t−1−j)ŵ} (suffix scan; S⁻ the prefix twin;
/// Ŝ the same scans of Ĥ) and U are the distance-weighted companions with
/// recurrence U_j = e^{−ŵ}(U_{j+1} + S_{j+1}). Causal mode keeps only the
/// suffix scans. Returned dw is w.r.t. the effective (pre-normalization)
/// decay; du and dw are summed over tokens per channel.
pub fn wkv_backward(
    k: &[f32],
    v: &[f32],
    params: &WkvParams,
    grad_h: &[f32],
    j: usize,
    d: usize,
    bidirectional: bool,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
    check_shapes(k, v, j, d)?;
    params.validate(d)?;
    if grad_h.len() != j * d {
        return Err(Error::shape("wkv_backward", "grad_h size"));
    }
    let wh = params.effective_decay(j);
    let sides = run_scans(k, v, &wh, j, d, bidirectional);
    let sign = bonus_sign();

    // Recompute h and the true denominators (den̂, m) per element, then form
    // G and Ĥ. True D_t = den̂·e^m; we fold e^{−m} into G on the fly.
    let mut gbuf = vec![0f64; j * d];
    let mut hbuf = vec![0f64; j * d];
    for t in 0..j {
        for c in 0..d {
            let i = t * d + c;
            let bonus = sign * (params.u[c] as f64 + k[i] as f64);
            let mut m = sides.fp[i].max(bonus);
            if bidirectional {
                m = m.max(sides.bp[i]);
            }
            let eb = (bonus - m).exp();
            let ef = (sides.fp[i] - m).exp();
            let mut num = sides.fa[i] * ef + v[i] as f64 * eb;
            let mut den = sides.fb[i] * ef + eb;
            if bidirectional {
                let er = (sides.bp[i] - m).exp();
                num += sides.ba[i] * er;
                den += sides.bb[i] * er;
            }
            if den == 0.0 {
                return Err(Error::NonFinite { op: "wkv_backward" });
            }
            let h = num / den;
            // G_t = g_t / (den̂·e^m); keep the e^{−m} factor explicit so later
            // products e^{k_j}·G stay in the safe e^{k_j − m} range.
            gbuf[i] = grad_h[i] as f64 / den * (-m).exp();
            hbuf[i] = gbuf[i] * h;
        }
    }

    let mut gk = vec![0f32; j * d];
    let mut gv = vec![0f32; j * d];
    let mut gw = vec![0f32; d];
    let mut gu = vec![0f32; d];

    for c in 0..d {
        let ew = (-wh[c]).exp();
        // Suffix scans: S_j covers t > j. Filled back-to-front.
        let mut s_g = vec![0f64; j];
        let mut s_h = vec![0f64; j];
        let mut u_g = vec![0f64; j];
        let mut u_h = vec![0f64; j];
        for t in (0..j.saturating_sub(1)).rev() {
            s_g[t] = gbuf[(t + 1) * d + c] + ew * s_g[t + 1];
            s_h[t] = hbuf[(t + 1) * d + c] + ew * s_h[t + 1];
            u_g[t] = ew * (u_g[t + 1] + s_g[t + 1]);
            u_h[t] = ew * (u_h[t + 1] + s_h[t + 1]);
        }
        // Prefix scans: T_j covers t < j. Only present bidirectionally.
        let mut t_g = vec![0f64; j];
        let mut t_h = vec![0f64; j];
        let mut p_g = vec![0f64; j];
        let mut p_h = vec![0f64; j];
        if bidirectional {
            for t in 1..j {
                t_g[t] = gbuf[(t - 1) * d + c] + ew * t_g[t - 1];
                t_h[t] = hbuf[(t - 1) * d + c] + ew * t_h[t - 1];
                p_g[t] = ew * (p_g[t - 1] + t_g[t - 1]);
                p_h[t] = ew * (p_h[t - 1] + t_h[t - 1]);
            }
        }
        let (mut dw_c, mut du_c) = (0f64, 0f64);
        for t in 0..j {
            let i = t * d + c;
            let ekj = (k[i] as f64).exp();
            let ebj = sign * ((sign * (params.u[c] as f64 + k[i] as f64)).exp());
            let vj = v[i] as f64;
            let sg = s_g[t] + t_g[t];
            let sh = s_h[t] + t_h[t];
            let ug = u_g[t] + p_g[t];
            let uh = u_h[t] + p_h[t];
            gv[i] = (ekj * sg + gbuf[i] * ebj.abs()) as f32;
            gk[i] = (ekj * (vj * sg - sh) + (gbuf[i] * vj - hbuf[i]) * ebj) as f32;
            du_c += (gbuf[i] * vj - hbuf[i]) * ebj;
            dw_c -= ekj * (vj * ug - uh);
        }
        gu[c] = du_c as f32;
        // dw_c is dL/dŵ; chain through ŵ = w/J when decay is normalized.
        let scale = if params.normalize_decay { 1.0 / j as f64 } else { 1.0 };
        gw[c] = (dw_c * scale) as f32;
    }
    Ok((gk, gv, gw, gu))
}

/// Eq.-13 accountant: FLOPs(Bi-WKV(K,V)) = 13·J·D, reported as written.
pub fn wkv_flops(j: u64, d: u64) -> u64 {
    13 * j * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rel_err(a: f32, b: f32) -> f32 {
        (a - b).abs() / (b.abs() + 1e-6)
    }

    fn rand_case(rng: &mut Rng, j: usize, d: usize, kmax: f32) -> (Vec<f32>, Vec<f32>, WkvParams) {
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

    #[test]
    fn j1_identity_bitwise() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let (k, v, params) = rand_case(&mut rng, 1, 6, 50.0);
            assert_eq!(wkv_causal(&k, &v, &params, 1, 6).unwrap(), v);
            assert_eq!(wkv_bidirectional(&k, &v, &params, 1, 6).unwrap(), v);
            assert_eq!(wkv_oracle(&k, &v, &params, 1, 6).unwrap(), v);
        }
    }

    #[test]
    fn causal_running_mean_when_flat() {
        // k=0, w=0, u=0 → h_t = mean(v_1..v_t)
        let j = 6;
        let v: Vec<f32> = (1..=j).map(|x| x as f32).collect();
        let k = vec![0f32; j];
        let h = wkv_causal(&k, &v, &WkvParams::zeros(1), j, 1).unwrap();
        for t in 0..j {
            let mean: f32 = v[..=t].iter().sum::<f32>() / (t + 1) as f32;
            assert!((h[t] - mean).abs() <= 1e-6, "t={t}: {} vs {mean}", h[t]);
        }
    }

    #[test]
    fn bidirectional_constant_when_flat() {
        let j = 9;
        let mut rng = Rng::new(12);
        let mut v = vec![0f32; j * 3];
        rng.fill_uniform(&mut v, -1.0, 1.0);
        let k = vec![0f32; j * 3];
        let h = wkv_bidirectional(&k, &v, &WkvParams::zeros(3), j, 3).unwrap();
        for c in 0..3 {
            let mean: f32 = (0..j).map(|t| v[t * 3 + c]).sum::<f32>() / j as f32;
            for t in 0..j {
                assert!((h[t * 3 + c] - mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn two_token_symmetric_mean() {
        // J=2, k=0, v=[1,3], w=u=0 → both outputs 2
        let h = wkv_bidirectional(&[0.0, 0.0], &[1.0, 3.0], &WkvParams::zeros(1), 2, 1).unwrap();
        assert!((h[0] - 2.0).abs() <= 1e-6 && (h[1] - 2.0).abs() <= 1e-6, "{h:?}");
    }

    #[test]
    fn matches_oracle_random() {
        let mut rng = Rng::new(13);
        for case in 0..200 {
            let j = 1 + rng.below(48);
            let d = 1 + rng.below(8);
            let (k, v, params) = rand_case(&mut rng, j, d, 50.0);
            let scan = wkv_bidirectional(&k, &v, &params, j, d).unwrap();
            let oracle = wkv_oracle(&k, &v, &params, j, d).unwrap();
            for (s, o) in scan.iter().zip(&oracle) {
                assert!(rel_err(*s, *o) <= 1e-5, "case {case} J={j} D={d}: {s} vs {o}");
            }
            let scan_c = wkv_causal(&k, &v, &params, j, d).unwrap();
            let oracle_c = wkv_oracle_causal(&k, &v, &params, j, d).unwrap();
            for (s, o) in scan_c.iter().zip(&oracle_c) {
                assert!(rel_err(*s, *o) <= 1e-5, "causal case {case}: {s} vs {o}");
            }
        }
    }

    #[test]
    fn overflow_robust_at_k80() {
        let mut rng = Rng::new(14);
        let (k, v, params) = rand_case(&mut rng, 32, 4, 80.0);
        let scan = wkv_bidirectional(&k, &v, &params, 32, 4).unwrap();
        assert!(scan.iter().all(|x| x.is_finite()));
        let oracle = wkv_oracle(&k, &v, &params, 32, 4).unwrap();
        for (s, o) in scan.iter().zip(&oracle) {
            assert!(rel_err(*s, *o) <= 1e-5);
        }
    }

    #[test]
    fn shift_invariance_in_k() {
        let mut rng = Rng::new(15);
        let (k, v, params) = rand_case(&mut rng, 24, 4, 10.0);
        let base = wkv_bidirectional(&k, &v, &params, 24, 4).unwrap();
        let shifted_k: Vec<f32> = k.iter().map(|x| x + 7.5).collect();
        let shifted = wkv_bidirectional(&shifted_k, &v, &params, 24, 4).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_zero_grad_gives_zeros() {
        let mut rng = Rng::new(16);
        let (k, v, params) = rand_case(&mut rng, 8, 3, 5.0);
        let g = vec![0f32; 24];
        let (gk, gv, gw, gu) = wkv_backward(&k, &v, &params, &g, 8, 3, true).unwrap();
        assert!(gk.iter().chain(&gv).chain(&gw).chain(&gu).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_j1() {
        // h₁ = v₁ exactly, so grad_v = grad_h and grad_k = 0.
        let params = WkvParams { w: vec![0.7], u: vec![0.3], normalize_decay: false };
        let (gk, gv, _gw, gu) = wkv_backward(&[2.0], &[5.0], &params, &[1.5], 1, 1, true).unwrap();
        assert!((gv[0] - 1.5).abs() <= 1e-6);
        assert!(gk[0].abs() <= 1e-6);
        assert!(gu[0].abs() <= 1e-6);
    }

    /// Central finite differences on the f64 oracle, perturbing one input.
    fn fd_grad(
        k: &[f64],
        v: &[f64],
        w: &[f64],
        u: &[f64],
        norm: bool,
        causal: bool,
        j: usize,
        d: usize,
        r: &[f64],
        which: usize,
        idx: usize,
    ) -> f64 {
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut kk = k.to_vec();
            let mut vv = v.to_vec();
            let mut ww = w.to_vec();
            let mut uu = u.to_vec();
            match which {
                0 => kk[idx] += delta,
                1 => vv[idx] += delta,
                2 => ww[idx] += delta,
                _ => uu[idx] += delta,
            }
            let out = wkv_oracle_f64(&kk, &vv, &ww, &uu, norm, causal, j, d);
            out.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(17);
        for &(bidir, j, d) in &[(true, 16usize, 4usize), (false, 16, 4), (true, 7, 3), (false, 5, 2)] {
            let (k, v, params) = rand_case(&mut rng, j, d, 4.0);
            let mut g = vec![0f32; j * d];
            rng.fill_uniform(&mut g, -1.0, 1.0);
            let (gk, gv, gw, gu) = wkv_backward(&k, &v, &params, &g, j, d, bidir).unwrap();

            let kf: Vec<f64> = k.iter().map(|&x| x as f64).collect();
            let vf: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            // FD against the effective decay: pass ŵ directly, normalize off.
            let scale = if params.normalize_decay { 1.0 / j as f64 } else { 1.0 };
            let wf: Vec<f64> = params.w.iter().map(|&x| x as f64 * scale).collect();
            let uf: Vec<f64> = params.u.iter().map(|&x| x as f64).collect();
            let rf: Vec<f64> = g.iter().map(|&x| x as f64).collect();

            let tol = |got: f32, want: f64| {
                let w = want as f32;
                let ok = if w.abs() >= 1e-4 { rel_err(got, w) <= 1e-3 } else { (got - w).abs() <= 1e-2 };
                assert!(ok, "grad {got} vs fd {w} (bidir={bidir}, J={j}, D={d})");
            };
            for i in 0..j * d {
                tol(gk[i], fd_grad(&kf, &vf, &wf, &uf, false, !bidir, j, d, &rf, 0, i));
                tol(gv[i], fd_grad(&kf, &vf, &wf, &uf, false, !bidir, j, d, &rf, 1, i));
            }
            for c in 0..d {
                // dw is reported w.r.t. pre-normalization w: chain by 1/J.
                let fd_w = fd_grad(&kf, &vf, &wf, &uf, false, !bidir, j, d, &rf, 2, c) * scale;
                tol(gw[c], fd_w);
                tol(gu[c], fd_grad(&kf, &vf, &wf, &uf, false, !bidir, j, d, &rf, 3, c));
            }
        }
    }

    #[test]
    fn flops_formula() {
        assert_eq!(wkv_flops(256, 768), 2_555_904);
        assert_eq!(wkv_flops(1, 1), 13);
        assert_eq!(wkv_flops(1024, 384), 5_111_808);
        assert_eq!(wkv_flops(512, 384), 2 * wkv_flops(256, 384));
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = WkvParams::zeros(2);
        assert!(wkv_causal(&[], &[], &params, 0, 2).is_err());
        assert!(wkv_causal(&[0.0; 4], &[0.0; 3], &params, 2, 2).is_err());
        let neg = WkvParams { w: vec![-0.1, 0.0], u: vec![0.0, 0.0], normalize_decay: false };
        assert!(wkv_causal(&[0.0; 4], &[0.0; 4], &neg, 2, 2).is_err());
    }

    #[test]
    fn fault_injection_breaks_oracle_match() {
        let mut rng = Rng::new(18);
        let (k, v, params) = rand_case(&mut rng, 16, 4, 5.0);
        let clean = wkv_bidirectional(&k, &v, &params, 16, 4).unwrap();
        set_fault_wkv_sign(true);
        let faulty = wkv_bidirectional(&k, &v, &params, 16, 4).unwrap();
        set_fault_wkv_sign(false);
        let oracle = wkv_oracle(&k, &v, &params, 16, 4).unwrap();
        let max_clean: f32 =
            clean.iter().zip(&oracle).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f32::max);
        let max_faulty: f32 =
            faulty.iter().zip(&oracle).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f32::max);
        assert!(max_clean <= 1e-5);
        assert!(max_faulty > 1e-3, "fault must be detectable: {max_faulty}");
    }
}
