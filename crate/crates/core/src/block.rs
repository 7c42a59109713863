//! One Bi-RWKV residual block: pre-norm (optionally condition-modulated),
//! quad-shift token mixing, spatial mix (Eqs. 3–6 around the bidirectional
//! WKV kernel), and channel mix (Eqs. 9–11), each behind a gated residual.

use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;
use crate::tape::{Graph, Var};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    InContext,
    Adaln,
    AdalnZero,
}

impl CondMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "in_context" => Some(Self::InContext),
            "adaln" => Some(Self::Adaln),
            "adaln_zero" => Some(Self::AdalnZero),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InContext => "in_context",
            Self::Adaln => "adaln",
            Self::AdalnZero => "adaln_zero",
        }
    }
}

/// Per-call geometry: every sample contributes rows_per consecutive rows, of
/// which the first `skip` are off-grid conditioning tokens and the remaining
/// gh·gw are the patch grid in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct BlockCtx {
    pub gh: usize,
    pub gw: usize,
    pub rows_per: usize,
    pub skip: usize,
    pub normalize_decay: bool,
}

impl BlockCtx {
    pub fn grid_tokens(&self) -> usize {
        self.gh * self.gw
    }
}

/// Graph handles for one block's weights, resolved from the flat ParamSet.
pub struct BlockVars {
    pub ln_g1: Var,
    pub ln_b1: Var,
    pub mu_q: Var,
    pub mu_k: Var,
    pub mu_v: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub decay_raw: Var,
    pub bonus: Var,
    pub ln_g2: Var,
    pub ln_b2: Var,
    pub mu_r: Var,
    pub mu_z: Var,
    pub w_r: Var,
    pub w_z: Var,
    pub w_vc: Var,
    pub mod_w: Option<Var>,
}

impl BlockVars {
    pub fn bind(ps: &ParamSet, b: &Bound, idx: usize) -> Result<Self> {
        let v = |suffix: &str| ps.var(b, &format!("blocks.{idx}.{suffix}"));
        let mod_name = format!("blocks.{idx}.mod.w");
        Ok(BlockVars {
            ln_g1: v("sp.ln_g")?,
            ln_b1: v("sp.ln_b")?,
            mu_q: v("sp.mu_q")?,
            mu_k: v("sp.mu_k")?,
            mu_v: v("sp.mu_v")?,
            w_q: v("sp.w_q")?,
            w_k: v("sp.w_k")?,
            w_v: v("sp.w_v")?,
            w_o: v("sp.w_o")?,
            decay_raw: v("sp.decay_raw")?,
            bonus: v("sp.bonus")?,
            ln_g2: v("ch.ln_g")?,
            ln_b2: v("ch.ln_b")?,
            mu_r: v("ch.mu_r")?,
            mu_z: v("ch.mu_z")?,
            w_r: v("ch.w_r")?,
            w_z: v("ch.w_z")?,
            w_vc: v("ch.w_v")?,
            mod_w: if ps.contains(&mod_name) { Some(ps.var(b, &mod_name)?) } else { None },
        })
    }
}

/// Per-sample modulation [B×D] tensors. `s*` are raw scales (effective
/// γ = 1 + s, so a zero-initialized regressor starts at identity scale);
/// `a* = None` means the residual gate α ≡ 1.
pub struct Modulation {
    pub s1: Var,
    pub b1: Var,
    pub a1: Option<Var>,
    pub s2: Var,
    pub b2: Var,
    pub a2: Option<Var>,
}

fn scaled_uniform(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let a = 1.0 / (fan_in as f32).sqrt();
    let mut v = vec![0f32; n];
    rng.fill_uniform(&mut v, -a, a);
    v
}

/// Register one block's tensors. W_o and W_v_ch start at zero so the block is
/// an exact identity at init — except under adaLN-Zero, where α=0 already
/// guarantees that and zeroing them too would freeze training (dα ∝ mix
/// output = 0 and d(mix weights) ∝ α = 0 is a stable fixed point).
pub fn init_block(ps: &mut ParamSet, idx: usize, d: usize, e: usize, mode: CondMode, rng: &mut Rng) -> Result<()> {
    let n = |suffix: &str| format!("blocks.{idx}.{suffix}");
    let zero_out_proj = mode != CondMode::AdalnZero;
    ps.add(n("sp.ln_g"), 1, d, vec![1.0; d])?;
    ps.add(n("sp.ln_b"), 1, d, vec![0.0; d])?;
    ps.add(n("sp.mu_q"), 1, d, vec![0.5; d])?;
    ps.add(n("sp.mu_k"), 1, d, vec![0.5; d])?;
    ps.add(n("sp.mu_v"), 1, d, vec![0.5; d])?;
    ps.add(n("sp.w_q"), d, d, scaled_uniform(rng, d * d, d))?;
    ps.add(n("sp.w_k"), d, d, scaled_uniform(rng, d * d, d))?;
    ps.add(n("sp.w_v"), d, d, scaled_uniform(rng, d * d, d))?;
    let w_o = if zero_out_proj { vec![0.0; d * d] } else { scaled_uniform(rng, d * d, d) };
    ps.add(n("sp.w_o"), d, d, w_o)?;
    ps.add(n("sp.decay_raw"), 1, d, vec![0.0; d])?;
    ps.add(n("sp.bonus"), 1, d, vec![0.0; d])?;
    ps.add(n("ch.ln_g"), 1, d, vec![1.0; d])?;
    ps.add(n("ch.ln_b"), 1, d, vec![0.0; d])?;
    ps.add(n("ch.mu_r"), 1, d, vec![0.5; d])?;
    ps.add(n("ch.mu_z"), 1, d, vec![0.5; d])?;
    ps.add(n("ch.w_r"), d, d, scaled_uniform(rng, d * d, d))?;
    ps.add(n("ch.w_z"), d, e * d, scaled_uniform(rng, d * e * d, d))?;
    let w_vc = if zero_out_proj { vec![0.0; e * d * d] } else { scaled_uniform(rng, e * d * d, e * d) };
    ps.add(n("ch.w_v"), e * d, d, w_vc)?;
    match mode {
        CondMode::InContext => {}
        // Effective γ = 1 + raw, so zero init means identity modulation.
        CondMode::Adaln => ps.add(n("mod.w"), d, 4 * d, scaled_uniform(rng, d * 4 * d, d))?,
        CondMode::AdalnZero => ps.add(n("mod.w"), d, 6 * d, vec![0.0; d * 6 * d])?,
    }
    Ok(())
}

/// Eqs. 3–6 downstream of the token shift: interpolate, project, run the
/// bidirectional kernel, gate by σ(q), project out. `x` must hold exactly the
/// J grid rows per sample, already normed/modulated.
pub fn spatial_mix_core(g: &mut Graph, x: Var, s: Var, bv: &BlockVars, j: usize, normalize_decay: bool) -> Result<Var> {
    let xq = g.token_interp(x, s, bv.mu_q)?;
    let xk = g.token_interp(x, s, bv.mu_k)?;
    let xv = g.token_interp(x, s, bv.mu_v)?;
    let q = g.matmul(xq, bv.w_q)?;
    let k = g.matmul(xk, bv.w_k)?;
    let v = g.matmul(xv, bv.w_v)?;
    let w_eff = g.exp(bv.decay_raw)?;
    let h = g.wkv(k, v, w_eff, bv.bonus, j, true, normalize_decay)?;
    let gate = g.sigmoid(q)?;
    let gh = g.mul(gate, h)?;
    g.matmul(gh, bv.w_o)
}

/// Spatial mix over a normed token stream. Conditioning rows are excluded
/// from the sequence here and contribute a zero residual delta.
pub fn spatial_mix(g: &mut Graph, x_norm: Var, bv: &BlockVars, ctx: &BlockCtx) -> Result<Var> {
    let j = ctx.grid_tokens();
    let grid = if ctx.skip > 0 { g.slice_rows(x_norm, ctx.skip, ctx.rows_per, ctx.rows_per)? } else { x_norm };
    let s = g.quad_shift(grid, ctx.gh, ctx.gw, j, 0)?;
    let out = spatial_mix_core(g, grid, s, bv, j, ctx.normalize_decay)?;
    if ctx.skip > 0 {
        g.scatter_rows(out, ctx.skip, j, ctx.rows_per)
    } else {
        Ok(out)
    }
}

/// Eqs. 9–11: gated squared-ReLU feedforward with its own token shift.
/// Conditioning rows participate (their shift source is the zero border).
pub fn channel_mix(g: &mut Graph, x_norm: Var, bv: &BlockVars, ctx: &BlockCtx) -> Result<Var> {
    let s = g.quad_shift(x_norm, ctx.gh, ctx.gw, ctx.rows_per, ctx.skip)?;
    let xr = g.token_interp(x_norm, s, bv.mu_r)?;
    let xz = g.token_interp(x_norm, s, bv.mu_z)?;
    let r = g.matmul(xr, bv.w_r)?;
    let z = g.matmul(xz, bv.w_z)?;
    let zsq = g.relu_sq(z)?;
    let vz = g.matmul(zsq, bv.w_vc)?;
    let gate = g.sigmoid(r)?;
    g.mul(gate, vz)
}

/// x ← x + α₁⊙spatial(mod₁(norm(x))); x ← x + α₂⊙channel(mod₂(norm(x))).
pub fn block_forward(g: &mut Graph, x: Var, bv: &BlockVars, ctx: &BlockCtx, m: Option<&Modulation>) -> Result<Var> {
    let n1 = g.layer_norm(x, bv.ln_g1, bv.ln_b1, LN_EPS)?;
    let m1 = match m {
        Some(mo) => g.modulate_rows(n1, mo.s1, mo.b1, ctx.rows_per)?,
        None => n1,
    };
    let sp = spatial_mix(g, m1, bv, ctx)?;
    let x = match m.and_then(|mo| mo.a1) {
        Some(a) => g.gated_add_rows(x, sp, a, ctx.rows_per)?,
        None => g.add(x, sp)?,
    };
    let n2 = g.layer_norm(x, bv.ln_g2, bv.ln_b2, LN_EPS)?;
    let m2 = match m {
        Some(mo) => g.modulate_rows(n2, mo.s2, mo.b2, ctx.rows_per)?,
        None => n2,
    };
    let ch = channel_mix(g, m2, bv, ctx)?;
    match m.and_then(|mo| mo.a2) {
        Some(a) => g.gated_add_rows(x, ch, a, ctx.rows_per),
        None => g.add(x, ch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_ctx(gh: usize, gw: usize, skip: usize) -> BlockCtx {
        BlockCtx { gh, gw, rows_per: skip + gh * gw, skip, normalize_decay: true }
    }

    /// Fresh block params with every tensor randomized (trained-like).
    fn generic_block(d: usize, e: usize, mode: CondMode, seed: u64) -> ParamSet {
        let mut rng = Rng::new(seed);
        let mut ps = ParamSet::new();
        init_block(&mut ps, 0, d, e, mode, &mut rng).unwrap();
        for t in &mut ps.items {
            if t.name.contains("mu_") {
                rng.fill_uniform(&mut t.data, 0.2, 0.8);
            } else if t.name.contains("decay_raw") {
                rng.fill_uniform(&mut t.data, -1.0, 0.5);
            } else {
                rng.fill_uniform(&mut t.data, -0.4, 0.4);
            }
        }
        ps
    }

    fn run_block(
        ps: &ParamSet,
        x0: &[f32],
        ctx: &BlockCtx,
        batch: usize,
        d: usize,
        with_mod: Option<(&[f32], &[f32], Option<&[f32]>)>,
    ) -> Vec<f32> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let bv = BlockVars::bind(ps, &b, 0).unwrap();
        let x = g.leaf(x0.to_vec(), batch * ctx.rows_per, d, false).unwrap();
        let m = with_mod.map(|(s, sh, a)| {
            let sv = g.leaf(s.to_vec(), batch, d, false).unwrap();
            let bvv = g.leaf(sh.to_vec(), batch, d, false).unwrap();
            let av = a.map(|a| g.leaf(a.to_vec(), batch, d, false).unwrap());
            Modulation { s1: sv, b1: bvv, a1: av, s2: sv, b2: bvv, a2: av }
        });
        let y = block_forward(&mut g, x, &bv, ctx, m.as_ref()).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn alpha_zero_is_bitwise_identity() {
        let (d, e) = (8, 2);
        let ps = generic_block(d, e, CondMode::AdalnZero, 41);
        let ctx = test_ctx(2, 3, 0);
        let mut rng = Rng::new(42);
        let mut x = vec![0f32; 2 * ctx.rows_per * d];
        rng.fill_uniform(&mut x, -2.0, 2.0);
        let mut s = vec![0f32; 2 * d];
        let mut sh = vec![0f32; 2 * d];
        rng.fill_uniform(&mut s, -1.0, 1.0);
        rng.fill_uniform(&mut sh, -1.0, 1.0);
        let alpha = vec![0f32; 2 * d];
        let y = run_block(&ps, &x, &ctx, 2, d, Some((&s, &sh, Some(&alpha))));
        let same = x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "α=0 must be a bitwise identity");
    }

    #[test]
    fn zero_out_projections_give_identity() {
        // in_context init zeroes W_o and W_v_ch: the whole block is identity.
        let (d, e) = (8, 2);
        let mut rng = Rng::new(43);
        let mut ps = ParamSet::new();
        init_block(&mut ps, 0, d, e, CondMode::InContext, &mut rng).unwrap();
        let ctx = test_ctx(2, 2, 1);
        let mut x = vec![0f32; ctx.rows_per * d];
        rng.fill_uniform(&mut x, -2.0, 2.0);
        let y = run_block(&ps, &x, &ctx, 1, d, None);
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn spatial_mix_single_token_composition() {
        // J=1, identity projections, μ=1: h₁ = v₁ = x, so out = σ(x)⊙x.
        let d = 4;
        let mut ps = generic_block(d, 2, CondMode::InContext, 44);
        for t in &mut ps.items {
            let n = t.name.clone();
            if n.contains("mu_") {
                t.data.iter_mut().for_each(|v| *v = 1.0);
            } else if n.contains("sp.w_") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    t.data[i * d + i] = 1.0;
                }
            }
        }
        let x0 = vec![0.3f32, -1.2, 0.0, 2.0];
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let bv = BlockVars::bind(&ps, &b, 0).unwrap();
        let x = g.leaf(x0.clone(), 1, d, false).unwrap();
        let s = g.quad_shift(x, 1, 1, 1, 0).unwrap();
        let y = spatial_mix_core(&mut g, x, s, &bv, 1, true).unwrap();
        for (i, &xi) in x0.iter().enumerate() {
            let want = xi / (1.0 + (-xi).exp());
            assert!((g.data(y)[i] - want).abs() <= 1e-6, "{} vs {want}", g.data(y)[i]);
        }
    }

    #[test]
    fn wo_zero_annihilates_spatial_mix() {
        let d = 8;
        let mut ps = generic_block(d, 2, CondMode::InContext, 45);
        ps.get_mut("blocks.0.sp.w_o").unwrap().data.fill(0.0);
        let ctx = test_ctx(2, 2, 0);
        let mut rng = Rng::new(46);
        let mut x = vec![0f32; ctx.rows_per * d];
        rng.fill_uniform(&mut x, -3.0, 3.0);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let bv = BlockVars::bind(&ps, &b, 0).unwrap();
        let xv = g.leaf(x, ctx.rows_per, d, false).unwrap();
        let y = spatial_mix(&mut g, xv, &bv, &ctx).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    /// Bi-WKV commutes with full sequence reversal (180° grid rotation), and
    /// the quad shift rotates with channel groups 0↔1, 2↔3 swapped; so the
    /// whole spatial mix is rotation-equivariant. (A horizontal-only mirror
    /// does NOT commute with the scan: it changes flattened pair distances.)
    #[test]
    fn spatial_mix_rotation_equivariance() {
        let (d, e) = (8, 2);
        let (gh, gw) = (3, 4);
        let j = gh * gw;
        let ps = generic_block(d, e, CondMode::InContext, 47);
        let mut rng = Rng::new(48);
        let mut x = vec![0f32; j * d];
        rng.fill_uniform(&mut x, -1.5, 1.5);
        let rot = |v: &[f32]| -> Vec<f32> {
            let mut out = vec![0f32; v.len()];
            for r in 0..j {
                out[(j - 1 - r) * d..(j - r) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
            }
            out
        };
        let run = |input: &[f32], shift: Option<&[f32]>| -> Vec<f32> {
            let mut g = Graph::new();
            let b = ps.bind(&mut g).unwrap();
            let bv = BlockVars::bind(&ps, &b, 0).unwrap();
            let xv = g.leaf(input.to_vec(), j, d, false).unwrap();
            let sv = match shift {
                Some(s) => g.leaf(s.to_vec(), j, d, false).unwrap(),
                None => g.quad_shift(xv, gh, gw, j, 0).unwrap(),
            };
            let y = spatial_mix_core(&mut g, xv, sv, &bv, j, true).unwrap();
            g.data(y).to_vec()
        };
        // Reference: rotate the output of the plain mix.
        let want = rot(&run(&x, None));
        // Candidate: mix the rotated input, feeding it the rotated shift
        // (equivalently, quad-shift with all four direction roles swapped).
        let base_shift = {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), j, d, false).unwrap();
            let s = g.quad_shift(xv, gh, gw, j, 0).unwrap();
            g.data(s).to_vec()
        };
        let got = run(&rot(&x), Some(&rot(&base_shift)));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn rotated_quad_shift_swaps_direction_roles() {
        // rot(QS(x)) == QS'(rot(x)) where QS' keeps channel ranges in place
        // but swaps direction roles: group 0 reads below, 1 above, 2 right,
        // 3 left.
        let d = 8;
        let (gh, gw) = (2usize, 3usize);
        let j = gh * gw;
        let q = d / 4;
        let mut rng = Rng::new(49);
        let mut x = vec![0f32; j * d];
        rng.fill_uniform(&mut x, -1.0, 1.0);
        let rot = |v: &[f32]| -> Vec<f32> {
            let mut out = vec![0f32; v.len()];
            for r in 0..j {
                out[(j - 1 - r) * d..(j - r) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
            }
            out
        };
        let qs = |v: &[f32]| -> Vec<f32> {
            let mut g = Graph::new();
            let xv = g.leaf(v.to_vec(), j, d, false).unwrap();
            let s = g.quad_shift(xv, gh, gw, j, 0).unwrap();
            g.data(s).to_vec()
        };
        let qs_swapped_roles = |v: &[f32]| -> Vec<f32> {
            let mut out = vec![0f32; v.len()];
            for gy in 0..gh {
                for gx in 0..gw {
                    let o = (gy * gw + gx) * d;
                    let mut take = |grp: usize, ny: isize, nx: isize| {
                        if ny >= 0 && nx >= 0 && (ny as usize) < gh && (nx as usize) < gw {
                            let src = (ny as usize * gw + nx as usize) * d;
                            out[o + grp * q..o + (grp + 1) * q]
                                .copy_from_slice(&v[src + grp * q..src + (grp + 1) * q]);
                        }
                    };
                    take(0, gy as isize + 1, gx as isize);
                    take(1, gy as isize - 1, gx as isize);
                    take(2, gy as isize, gx as isize + 1);
                    take(3, gy as isize, gx as isize - 1);
                }
            }
            out
        };
        assert_eq!(rot(&qs(&x)), qs_swapped_roles(&rot(&x)));
    }

    #[test]
    fn outputs_finite_for_bounded_inputs() {
        let (d, e) = (8, 4);
        let mut rng = Rng::new(50);
        for mode in [CondMode::InContext, CondMode::AdalnZero] {
            let mut ps = ParamSet::new();
            init_block(&mut ps, 0, d, e, mode, &mut rng).unwrap();
            let skip = if mode == CondMode::InContext { 2 } else { 0 };
            let ctx = test_ctx(3, 3, skip);
            let mut x = vec![0f32; 2 * ctx.rows_per * d];
            rng.fill_uniform(&mut x, -10.0, 10.0);
            let modulation = (mode == CondMode::AdalnZero).then(|| {
                let z = vec![0f32; 2 * d];
                (z.clone(), z.clone(), Some(z))
            });
            let y = match &modulation {
                Some((s, b, a)) => run_block(&ps, &x, &ctx, 2, d, Some((s, b, a.as_deref()))),
                None => run_block(&ps, &x, &ctx, 2, d, None),
            };
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn every_weight_gets_gradient() {
        let (d, e) = (8, 2);
        let ps = generic_block(d, e, CondMode::InContext, 51);
        let ctx = test_ctx(2, 2, 1);
        let mut rng = Rng::new(52);
        let mut x0 = vec![0f32; 2 * ctx.rows_per * d];
        rng.fill_uniform(&mut x0, -1.0, 1.0);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let bv = BlockVars::bind(&ps, &b, 0).unwrap();
        let x = g.leaf(x0, 2 * ctx.rows_per, d, false).unwrap();
        let y = block_forward(&mut g, x, &bv, &ctx, None).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        for (i, t) in ps.items.iter().enumerate() {
            let gr = g.grad(b.vars[i]).unwrap_or_else(|| panic!("{} missing grad", t.name));
            assert!(gr.iter().any(|&v| v != 0.0), "{} has all-zero gradient", t.name);
        }
    }
}
