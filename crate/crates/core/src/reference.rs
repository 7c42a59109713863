//! Straight-line f64 re-implementation of the block equations and the full
//! forward pass. No tape, no tiling, no threading — this is the numeric
//! oracle the graph implementation is checked against, and the function the
//! full-model finite-difference gradient tests differentiate.

use crate::backbone::{patchify, timestep_features, ModelConfig, FREQ_DIM};
use crate::block::{CondMode, LN_EPS};
use crate::error::Result;
use crate::params::ParamSet;
use crate::wkv::wkv_oracle_f64;

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..n {
                out[i * n + j] += av * b[kk * n + j];
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0f64; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Quad-directional shift with the same conventions as the graph op: four
/// contiguous channel quarters take the neighbor above/below/left/right;
/// borders and the `skip` conditioning rows read (and emit) zeros.
fn quad_shift(x: &[f64], gh: usize, gw: usize, rows_per: usize, skip: usize, d: usize) -> Vec<f64> {
    let batch = x.len() / (rows_per * d);
    let q = d / 4;
    let mut out = vec![0f64; x.len()];
    for s in 0..batch {
        let base = s * rows_per;
        for gy in 0..gh {
            for gx in 0..gw {
                let o = (base + skip + gy * gw + gx) * d;
                let mut take = |grp: usize, ny: isize, nx: isize| {
                    if ny >= 0 && nx >= 0 && (ny as usize) < gh && (nx as usize) < gw {
                        let src = (base + skip + ny as usize * gw + nx as usize) * d;
                        out[o + grp * q..o + (grp + 1) * q]
                            .copy_from_slice(&x[src + grp * q..src + (grp + 1) * q]);
                    }
                };
                take(0, gy as isize - 1, gx as isize);
                take(1, gy as isize + 1, gx as isize);
                take(2, gy as isize, gx as isize - 1);
                take(3, gy as isize, gx as isize + 1);
            }
        }
    }
    out
}

fn interp(x: &[f64], xs: &[f64], mu: &[f64], d: usize) -> Vec<f64> {
    x.iter()
        .zip(xs)
        .enumerate()
        .map(|(i, (&a, &b))| {
            let m = mu[i % d].clamp(0.0, 1.0);
            m * a + (1.0 - m) * b
        })
        .collect()
}

/// f64 copy of one block's weights, looked up by canonical names.
pub struct RefBlock {
    ln_g1: Vec<f64>,
    ln_b1: Vec<f64>,
    mu_q: Vec<f64>,
    mu_k: Vec<f64>,
    mu_v: Vec<f64>,
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    w_o: Vec<f64>,
    decay_raw: Vec<f64>,
    bonus: Vec<f64>,
    ln_g2: Vec<f64>,
    ln_b2: Vec<f64>,
    mu_r: Vec<f64>,
    mu_z: Vec<f64>,
    w_r: Vec<f64>,
    w_z: Vec<f64>,
    w_vc: Vec<f64>,
    mod_w: Option<Vec<f64>>,
    d: usize,
    e: usize,
}

pub fn f64s(ps: &ParamSet, name: &str) -> Result<Vec<f64>> {
    Ok(ps.get(name)?.data.iter().map(|&v| v as f64).collect())
}

impl RefBlock {
    pub fn load(ps: &ParamSet, idx: usize, e: usize) -> Result<Self> {
        let n = |s: &str| format!("blocks.{idx}.{s}");
        let d = ps.get(&n("sp.w_q"))?.rows;
        Ok(RefBlock {
            ln_g1: f64s(ps, &n("sp.ln_g"))?,
            ln_b1: f64s(ps, &n("sp.ln_b"))?,
            mu_q: f64s(ps, &n("sp.mu_q"))?,
            mu_k: f64s(ps, &n("sp.mu_k"))?,
            mu_v: f64s(ps, &n("sp.mu_v"))?,
            w_q: f64s(ps, &n("sp.w_q"))?,
            w_k: f64s(ps, &n("sp.w_k"))?,
            w_v: f64s(ps, &n("sp.w_v"))?,
            w_o: f64s(ps, &n("sp.w_o"))?,
            decay_raw: f64s(ps, &n("sp.decay_raw"))?,
            bonus: f64s(ps, &n("sp.bonus"))?,
            ln_g2: f64s(ps, &n("ch.ln_g"))?,
            ln_b2: f64s(ps, &n("ch.ln_b"))?,
            mu_r: f64s(ps, &n("ch.mu_r"))?,
            mu_z: f64s(ps, &n("ch.mu_z"))?,
            w_r: f64s(ps, &n("ch.w_r"))?,
            w_z: f64s(ps, &n("ch.w_z"))?,
            w_vc: f64s(ps, &n("ch.w_v"))?,
            mod_w: if ps.contains(&n("mod.w")) { Some(f64s(ps, &n("mod.w"))?) } else { None },
            d,
            e,
        })
    }
}

/// Per-sample modulation vectors, each [B×D]; raw scales (effective 1+s).
pub struct RefMod {
    pub s1: Vec<f64>,
    pub b1: Vec<f64>,
    pub a1: Option<Vec<f64>>,
    pub s2: Vec<f64>,
    pub b2: Vec<f64>,
    pub a2: Option<Vec<f64>>,
}

/// Eqs. 3–6 on a normed stream: conditioning rows are excluded from the
/// sequence and receive a zero delta.
pub fn ref_spatial_mix(x_norm: &[f64], blk: &RefBlock, gh: usize, gw: usize, skip: usize, normalize_decay: bool) -> Vec<f64> {
    let d = blk.d;
    let j = gh * gw;
    let rows_per = skip + j;
    let batch = x_norm.len() / (rows_per * d);
    let w_eff: Vec<f64> = blk.decay_raw.iter().map(|v| v.exp()).collect();
    let mut out = vec![0f64; x_norm.len()];
    for s in 0..batch {
        let grid: Vec<f64> = x_norm[(s * rows_per + skip) * d..(s + 1) * rows_per * d].to_vec();
        let sh = quad_shift(&grid, gh, gw, j, 0, d);
        let xq = interp(&grid, &sh, &blk.mu_q, d);
        let xk = interp(&grid, &sh, &blk.mu_k, d);
        let xv = interp(&grid, &sh, &blk.mu_v, d);
        let q = mm(&xq, &blk.w_q, j, d, d);
        let k = mm(&xk, &blk.w_k, j, d, d);
        let v = mm(&xv, &blk.w_v, j, d, d);
        let h = wkv_oracle_f64(&k, &v, &w_eff, &blk.bonus, normalize_decay, false, j, d);
        let gated: Vec<f64> = q.iter().zip(&h).map(|(&qi, &hi)| sigmoid(qi) * hi).collect();
        let o = mm(&gated, &blk.w_o, j, d, d);
        out[(s * rows_per + skip) * d..(s + 1) * rows_per * d].copy_from_slice(&o);
    }
    out
}

/// Eqs. 9–11; conditioning rows participate with zero shift source.
pub fn ref_channel_mix(x_norm: &[f64], blk: &RefBlock, gh: usize, gw: usize, skip: usize) -> Vec<f64> {
    let (d, e) = (blk.d, blk.e);
    let rows_per = skip + gh * gw;
    let rows = x_norm.len() / d;
    let sh = quad_shift(x_norm, gh, gw, rows_per, skip, d);
    let xr = interp(x_norm, &sh, &blk.mu_r, d);
    let xz = interp(x_norm, &sh, &blk.mu_z, d);
    let r = mm(&xr, &blk.w_r, rows, d, d);
    let z = mm(&xz, &blk.w_z, rows, d, e * d);
    let zsq: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v * v } else { 0.0 }).collect();
    let vz = mm(&zsq, &blk.w_vc, rows, e * d, d);
    r.iter().zip(&vz).map(|(&ri, &vi)| sigmoid(ri) * vi).collect()
}

fn modulate(x: &[f64], s: &[f64], b: &[f64], rows_per: usize, d: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let sample = i / (rows_per * d);
            let c = i % d;
            v * (1.0 + s[sample * d + c]) + b[sample * d + c]
        })
        .collect()
}

fn gated_add(x: &[f64], y: &[f64], a: Option<&Vec<f64>>, rows_per: usize, d: usize) -> Vec<f64> {
    match a {
        None => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
        Some(al) => x
            .iter()
            .zip(y)
            .enumerate()
            .map(|(i, (&p, &q))| {
                let sample = i / (rows_per * d);
                let c = i % d;
                p + al[sample * d + c] * q
            })
            .collect(),
    }
}

pub fn ref_block_forward(x: &[f64], blk: &RefBlock, gh: usize, gw: usize, skip: usize, normalize_decay: bool, m: Option<&RefMod>) -> Vec<f64> {
    let d = blk.d;
    let rows_per = skip + gh * gw;
    let n1 = layer_norm(x, &blk.ln_g1, &blk.ln_b1, d);
    let m1 = match m {
        Some(mo) => modulate(&n1, &mo.s1, &mo.b1, rows_per, d),
        None => n1,
    };
    let sp = ref_spatial_mix(&m1, blk, gh, gw, skip, normalize_decay);
    let x = gated_add(x, &sp, m.and_then(|mo| mo.a1.as_ref()), rows_per, d);
    let n2 = layer_norm(&x, &blk.ln_g2, &blk.ln_b2, d);
    let m2 = match m {
        Some(mo) => modulate(&n2, &mo.s2, &mo.b2, rows_per, d),
        None => n2,
    };
    let ch = ref_channel_mix(&m2, blk, gh, gw, skip);
    gated_add(&x, &ch, m.and_then(|mo| mo.a2.as_ref()), rows_per, d)
}

/// Full-model forward in f64, mirroring `backbone::forward` operation for
/// operation. Returns (ε̂, raw σ logits) in image layout [B × C·H·W].
pub fn ref_forward(ps: &ParamSet, cfg: &ModelConfig, x_t: &[f32], t: &[usize], labels: &[usize]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    cfg.validate()?;
    let bsz = t.len();
    let (gh, gw) = cfg.grid();
    let j = cfg.tokens();
    let d = cfg.d;
    let tok_w = cfg.p * cfg.p * cfg.c;
    let m = cfg.cond_tokens();
    let rows_per = m + j;

    let patch_embed = f64s(ps, "patch_embed")?;
    let pos = f64s(ps, "pos_embed")?;
    let w1 = f64s(ps, "t_mlp.w1")?;
    let w2 = f64s(ps, "t_mlp.w2")?;

    // tokens + positional embedding
    let mut tok = Vec::with_capacity(bsz * j * tok_w);
    for s in 0..bsz {
        let img: Vec<f32> = x_t[s * cfg.pixels()..(s + 1) * cfg.pixels()].to_vec();
        tok.extend(patchify(&img, cfg.c, cfg.h, cfg.w, cfg.p).iter().map(|&v| v as f64));
    }
    let mut x = mm(&tok, &patch_embed, bsz * j, tok_w, d);
    for (i, v) in x.iter_mut().enumerate() {
        *v += pos[(i / d % j) * d + i % d];
    }

    // condition pieces
    let mut feats = Vec::with_capacity(bsz * FREQ_DIM);
    for &ti in t {
        feats.extend(timestep_features(ti as f64, FREQ_DIM).iter().map(|&v| v as f64));
    }
    let h1 = mm(&feats, &w1, bsz, FREQ_DIM, d);
    let h1: Vec<f64> = h1.iter().map(|&v| v * sigmoid(v)).collect();
    let temb = mm(&h1, &w2, bsz, d, d);
    let lemb: Option<Vec<f64>> = if cfg.num_classes > 0 {
        let table = f64s(ps, "label_table")?;
        let mut le = Vec::with_capacity(bsz * d);
        for &c in labels {
            le.extend_from_slice(&table[c * d..(c + 1) * d]);
        }
        Some(le)
    } else {
        None
    };

    // stream assembly and modulation source
    let mut stream;
    let mut silu_c = None;
    if cfg.cond_mode == CondMode::InContext {
        stream = vec![0f64; bsz * rows_per * d];
        for s in 0..bsz {
            let base = s * rows_per * d;
            stream[base..base + d].copy_from_slice(&temb[s * d..(s + 1) * d]);
            if let Some(le) = &lemb {
                stream[base + d..base + 2 * d].copy_from_slice(&le[s * d..(s + 1) * d]);
            }
            stream[base + m * d..base + rows_per * d].copy_from_slice(&x[s * j * d..(s + 1) * j * d]);
        }
    } else {
        stream = x;
        let cvec: Vec<f64> = match &lemb {
            Some(le) => temb.iter().zip(le).map(|(&a, &b)| a + b).collect(),
            None => temb.clone(),
        };
        silu_c = Some(cvec.iter().map(|&v| v * sigmoid(v)).collect::<Vec<f64>>());
    }

    let half = cfg.l / 2;
    let mut skip_stack: Vec<Vec<f64>> = Vec::with_capacity(half);
    for i in 0..cfg.l {
        let blk = RefBlock::load(ps, i, cfg.e)?;
        if cfg.skip && i > half {
            let hs = skip_stack.pop().expect("skip stack underflow");
            let proj = f64s(ps, &format!("skips.{}", i - half - 1))?;
            let rows = stream.len() / d;
            let mut cat = vec![0f64; rows * 2 * d];
            for r in 0..rows {
                cat[r * 2 * d..r * 2 * d + d].copy_from_slice(&stream[r * d..(r + 1) * d]);
                cat[r * 2 * d + d..(r + 1) * 2 * d].copy_from_slice(&hs[r * d..(r + 1) * d]);
            }
            stream = mm(&cat, &proj, rows, 2 * d, d);
        }
        let modulation = match (&silu_c, &blk.mod_w) {
            (Some(sc), Some(mw)) => {
                let width = mw.len() / d;
                let mo = mm(sc, mw, bsz, d, width);
                let col = |k: usize| -> Vec<f64> {
                    (0..bsz * d).map(|i| mo[(i / d) * width + k * d + i % d]).collect()
                };
                Some(if width == 4 * d {
                    RefMod { s1: col(0), b1: col(1), a1: None, s2: col(2), b2: col(3), a2: None }
                } else {
                    RefMod {
                        s1: col(0),
                        b1: col(1),
                        a1: Some(col(2)),
                        s2: col(3),
                        b2: col(4),
                        a2: Some(col(5)),
                    }
                })
            }
            _ => None,
        };
        stream = ref_block_forward(&stream, &blk, gh, gw, m, cfg.normalize_decay, modulation.as_ref());
        if cfg.skip && i < half {
            skip_stack.push(stream.clone());
        }
    }

    if m > 0 {
        let mut grid = vec![0f64; bsz * j * d];
        for s in 0..bsz {
            grid[s * j * d..(s + 1) * j * d]
                .copy_from_slice(&stream[(s * rows_per + m) * d..(s + 1) * rows_per * d]);
        }
        stream = grid;
    }
    let fg = f64s(ps, "final.ln_g")?;
    let fb = f64s(ps, "final.ln_b")?;
    let normed = layer_norm(&stream, &fg, &fb, d);
    let dec_w = f64s(ps, "decoder")?;
    let om = cfg.out_mult();
    let dec = mm(&normed, &dec_w, bsz * j, d, tok_w * om);

    // unpatchify to [B × om·C·H·W]
    let px = cfg.pixels();
    let ch = cfg.c * om;
    let mut img = vec![0f64; bsz * ch * cfg.h * cfg.w];
    let tw = cfg.p * cfg.p * ch;
    for s in 0..bsz {
        for gy in 0..gh {
            for gx in 0..gw {
                let tokbase = (s * j + gy * gw + gx) * tw;
                for py in 0..cfg.p {
                    for pxl in 0..cfg.p {
                        for c in 0..ch {
                            img[s * ch * cfg.h * cfg.w
                                + c * cfg.h * cfg.w
                                + (gy * cfg.p + py) * cfg.w
                                + (gx * cfg.p + pxl)] = dec[tokbase + (py * cfg.p + pxl) * ch + c];
                        }
                    }
                }
            }
        }
    }
    if cfg.learn_sigma {
        let mut eps = vec![0f64; bsz * px];
        let mut sig = vec![0f64; bsz * px];
        for s in 0..bsz {
            eps[s * px..(s + 1) * px].copy_from_slice(&img[s * 2 * px..s * 2 * px + px]);
            sig[s * px..(s + 1) * px].copy_from_slice(&img[s * 2 * px + px..(s + 1) * 2 * px]);
        }
        Ok((eps, Some(sig)))
    } else {
        Ok((img, None))
    }
}

/// Scalar probe for gradient checks: MSE(ε̂, target_eps) + MSE(σ_raw,
/// target_sig). Exercises every parameter path with no stop-gradients.
pub fn ref_probe_loss(ps: &ParamSet, cfg: &ModelConfig, x_t: &[f32], t: &[usize], labels: &[usize], target_eps: &[f64], target_sig: &[f64]) -> Result<f64> {
    let (eps, sig) = ref_forward(ps, cfg, x_t, t, labels)?;
    let mse = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    };
    let mut loss = mse(&eps, target_eps);
    if let Some(s) = sig {
        loss += mse(&s, target_sig);
    }
    Ok(loss)
}
