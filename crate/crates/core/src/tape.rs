//! Define-by-run reverse-mode autodiff over 2-D f32 buffers.
//!
//! Every graph tensor is [rows × cols]; batches are folded into rows, and ops
//! that need per-sample structure carry a rows-per-sample count. Replaying
//! adjoints walks nodes in exact reverse execution order. Determinism
//! contract: parallel execution inside an op only ever writes disjoint output
//! regions, and every reduction has a fixed documented order, so results are
//! bit-identical for any thread count.

use crate::error::{Error, Result};
use crate::tensor::gemm;
use crate::wkv::{wkv_backward, wkv_bidirectional, wkv_causal, WkvParams};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MaxElem { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    AddConst { a: Var },
    Exp { a: Var },
    Sigmoid { a: Var },
    Silu { a: Var },
    ReluSq { a: Var },
    Tanh { a: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    MeanAll { a: Var },
    SumAll { a: Var },
    Mse { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, c0: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: Vec<f32> },
    TokenInterp { x: Var, xs: Var, mu: Var },
    QuadShift { x: Var, gh: usize, gw: usize, rows_per: usize, skip: usize },
    Wkv { k: Var, v: Var, w: Var, u: Var, rows_per: usize, bidirectional: bool, normalize: bool },
    ModulateRows { x: Var, scale: Var, shift: Var, rows_per: usize },
    GatedAddRows { x: Var, y: Var, alpha: Var, rows_per: usize },
    AddTiledRows { x: Var, t: Var },
    EmbedRows { table: Var, ids: Vec<usize> },
    InterleaveRows { a: Var, b: Var },
    SliceRows { x: Var, r0: usize, rows_per: usize },
    ScatterRows { x: Var, r0: usize, rows_per_out: usize },
    Unpatchify { x: Var, p: usize, gh: usize, gw: usize, ch: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn leaf(&mut self, data: Vec<f32>, rows: usize, cols: usize, requires: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape("leaf", format!("{} elements for {rows}×{cols}", data.len())));
        }
        Ok(self.push(rows, cols, data, requires, Op::Leaf))
    }

    /// Value copied in with gradient flow cut.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (rows, cols, data) = (n.rows, n.cols, n.data.clone());
        self.push(rows, cols, data, false, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    /// Scalar payload of a [1×1] node.
    pub fn value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f32>, requires: bool, op: Op) -> Var {
        self.nodes.push(Node { rows, cols, data, grad: None, requires, op });
        Var(self.nodes.len() - 1)
    }

    fn finite(&self, v: Var, op: &'static str) -> Result<Var> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::shape(op, format!("{ra}×{ca} vs {rb}×{cb}")));
        }
        Ok((ra, ca))
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0f32; m * n];
        gemm(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, false, false, false);
        let req = self.req(&[a, b]);
        let v = self.push(m, n, out, req, Op::Matmul { a, b });
        self.finite(v, "matmul")
    }

    fn ew2(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, name)?;
        let out: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.req(&[a, b]);
        let v = self.push(r, c, out, req, op);
        self.finite(v, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew2(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew2(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew2(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew2(a, b, "max", |x, y| x.max(y), Op::MaxElem { a, b })
    }

    fn ew1(&mut self, a: Var, name: &'static str, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let req = self.req(&[a]);
        let v = self.push(r, c, out, req, op);
        self.finite(v, name)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.ew1(a, "scale", |x| x * c, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Result<Var> {
        self.ew1(a, "add_const", |x| x + c, Op::AddConst { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.ew1(a, "exp", f32::exp, Op::Exp { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.ew1(a, "sigmoid", sigmoid, Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.ew1(a, "silu", |x| x * sigmoid(x), Op::Silu { a })
    }

    pub fn relu_sq(&mut self, a: Var) -> Result<Var> {
        self.ew1(a, "relu_sq", |x| { let r = x.max(0.0); r * r }, Op::ReluSq { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.ew1(a, "tanh", f32::tanh, Op::Tanh { a })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(c, r, out, req, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("{r}×{c} -> {rows}×{cols}")));
        }
        let data = self.nodes[a.0].data.clone();
        let req = self.req(&[a]);
        Ok(self.push(rows, cols, data, req, Op::Reshape { a }))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len().max(1);
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let req = self.req(&[a]);
        let v = self.push(1, 1, vec![(s / n as f64) as f32], req, Op::MeanAll { a });
        self.finite(v, "mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let req = self.req(&[a]);
        let v = self.push(1, 1, vec![s as f32], req, Op::SumAll { a });
        self.finite(v, "sum")
    }

    /// Mean squared error over all elements; d/da = 2(a−b)/N.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let n = self.nodes[a.0].data.len().max(1);
        let req = self.req(&[a, b]);
        let v = self.push(1, 1, vec![(s / n as f64) as f32], req, Op::Mse { a, b });
        self.finite(v, "mse")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} vs {rb} rows")));
        }
        let mut out = vec![0f32; ra * (ca + cb)];
        for i in 0..ra {
            out[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let req = self.req(&[a, b]);
        Ok(self.push(ra, ca + cb, out, req, Op::ConcatCols { a, b }))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c0 >= c1 || c1 > c {
            return Err(Error::shape("slice_cols", format!("[{c0}, {c1}) of {c}")));
        }
        let w = c1 - c0;
        let mut out = vec![0f32; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&self.nodes[a.0].data[i * c + c0..i * c + c1]);
        }
        let req = self.req(&[a]);
        Ok(self.push(r, w, out, req, Op::SliceCols { a, c0 }))
    }

    /// Row-wise layer norm with population variance; eps ≥ 0.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (r, d) = self.shape(x);
        if d == 0 {
            return Err(Error::shape("layer_norm", "zero-width rows"));
        }
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(Error::shape("layer_norm", "gamma/beta must be [1×D]"));
        }
        let mut out = vec![0f32; r * d];
        let mut saved = vec![0f32; 2 * r];
        {
            let xs = &self.nodes[x.0].data;
            let ga = &self.nodes[gamma.0].data;
            let be = &self.nodes[beta.0].data;
            let pairs: Vec<(usize, &mut [f32])> = out.chunks_mut(d).enumerate().collect();
            let stats: Vec<(f32, f32)> = pairs
                .into_par_iter()
                .map(|(i, orow)| {
                    let row = &xs[i * d..(i + 1) * d];
                    let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as f32;
                    let var = (row.iter().map(|&v| { let c = (v - mean) as f64; c * c }).sum::<f64>()
                        / d as f64) as f32;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        orow[j] = (row[j] - mean) * rstd * ga[j] + be[j];
                    }
                    (mean, rstd)
                })
                .collect();
            for (i, (m, rs)) in stats.into_iter().enumerate() {
                saved[2 * i] = m;
                saved[2 * i + 1] = rs;
            }
        }
        let req = self.req(&[x, gamma, beta]);
        let v = self.push(r, d, out, req, Op::LayerNorm { x, gamma, beta, saved });
        self.finite(v, "layer_norm")
    }

    /// μ⊙x + (1−μ)⊙x_shift with μ clamped to [0,1] at use; the μ gradient is
    /// the subgradient (zero outside the open interval).
    pub fn token_interp(&mut self, x: Var, xs: Var, mu: Var) -> Result<Var> {
        let (r, d) = self.same_shape(x, xs, "token_interp")?;
        if self.shape(mu) != (1, d) {
            return Err(Error::shape("token_interp", "mu must be [1×D]"));
        }
        let mut out = vec![0f32; r * d];
        {
            let xv = &self.nodes[x.0].data;
            let sv = &self.nodes[xs.0].data;
            let mv = &self.nodes[mu.0].data;
            for i in 0..r {
                for j in 0..d {
                    let m = mv[j].clamp(0.0, 1.0);
                    out[i * d + j] = m * xv[i * d + j] + (1.0 - m) * sv[i * d + j];
                }
            }
        }
        let req = self.req(&[x, xs, mu]);
        let v = self.push(r, d, out, req, Op::TokenInterp { x, xs, mu });
        self.finite(v, "token_interp")
    }

    /// Quad-directional shift on a gh×gw grid per sample. Channel quarters
    /// take the neighbor above/below/left/right; out-of-grid contributes
    /// zeros. The first `skip` rows of each sample sit off-grid (in-context
    /// tokens): they emit zeros and are nobody's neighbor.
    pub fn quad_shift(&mut self, x: Var, gh: usize, gw: usize, rows_per: usize, skip: usize) -> Result<Var> {
        let (r, d) = self.shape(x);
        if d % 4 != 0 {
            return Err(Error::Config(format!("quad_shift: D={d} not divisible by 4")));
        }
        if skip + gh * gw != rows_per || rows_per == 0 || r % rows_per != 0 {
            return Err(Error::shape("quad_shift", format!("rows {r}, rows_per {rows_per}, grid {gh}×{gw}+{skip}")));
        }
        let batch = r / rows_per;
        let mut out = vec![0f32; r * d];
        let xv = &self.nodes[x.0].data;
        let q = d / 4;
        out.par_chunks_mut(rows_per * d).enumerate().for_each(|(s, chunk)| {
            let base = s * rows_per;
            for gy in 0..gh {
                for gx in 0..gw {
                    let orow = &mut chunk[(skip + gy * gw + gx) * d..(skip + gy * gw + gx + 1) * d];
                    let mut take = |grp: usize, ny: isize, nx: isize| {
                        if ny >= 0 && nx >= 0 && (ny as usize) < gh && (nx as usize) < gw {
                            let src = (base + skip + ny as usize * gw + nx as usize) * d;
                            orow[grp * q..(grp + 1) * q]
                                .copy_from_slice(&xv[src + grp * q..src + (grp + 1) * q]);
                        }
                    };
                    take(0, gy as isize - 1, gx as isize);
                    take(1, gy as isize + 1, gx as isize);
                    take(2, gy as isize, gx as isize - 1);
                    take(3, gy as isize, gx as isize + 1);
                }
            }
        });
        let _ = batch;
        let req = self.req(&[x]);
        Ok(self.push(r, d, out, req, Op::QuadShift { x, gh, gw, rows_per, skip }))
    }

    /// Per-sample WKV over rows_per-token sequences. `w` is the effective
    /// (≥0) decay and `u` the bonus, both [1×D].
    pub fn wkv(&mut self, k: Var, v: Var, w: Var, u: Var, rows_per: usize, bidirectional: bool, normalize: bool) -> Result<Var> {
        let (r, d) = self.same_shape(k, v, "wkv")?;
        if self.shape(w) != (1, d) || self.shape(u) != (1, d) {
            return Err(Error::shape("wkv", "w/u must be [1×D]"));
        }
        if rows_per == 0 || r % rows_per != 0 {
            return Err(Error::shape("wkv", format!("rows {r} not divisible by rows_per {rows_per}")));
        }
        let params = WkvParams {
            w: self.nodes[w.0].data.clone(),
            u: self.nodes[u.0].data.clone(),
            normalize_decay: normalize,
        };
        let kv = &self.nodes[k.0].data;
        let vv = &self.nodes[v.0].data;
        let chunks: Result<Vec<Vec<f32>>> = kv
            .par_chunks(rows_per * d)
            .zip(vv.par_chunks(rows_per * d))
            .map(|(kc, vc)| {
                if bidirectional {
                    wkv_bidirectional(kc, vc, &params, rows_per, d)
                } else {
                    wkv_causal(kc, vc, &params, rows_per, d)
                }
            })
            .collect();
        let out: Vec<f32> = chunks?.concat();
        let req = self.req(&[k, v, w, u]);
        let var = self.push(r, d, out, req, Op::Wkv { k, v, w, u, rows_per, bidirectional, normalize });
        self.finite(var, "wkv")
    }

    /// Row r of sample s maps to x_r⊙(1+scale_s) + shift_s.
    pub fn modulate_rows(&mut self, x: Var, scale: Var, shift: Var, rows_per: usize) -> Result<Var> {
        let (r, d) = self.shape(x);
        let b = self.per_sample_check("modulate_rows", r, rows_per, scale, shift, d)?;
        let mut out = vec![0f32; r * d];
        {
            let xv = &self.nodes[x.0].data;
            let sc = &self.nodes[scale.0].data;
            let sh = &self.nodes[shift.0].data;
            for s in 0..b {
                for rr in 0..rows_per {
                    let row = (s * rows_per + rr) * d;
                    for j in 0..d {
                        out[row + j] = xv[row + j] * (1.0 + sc[s * d + j]) + sh[s * d + j];
                    }
                }
            }
        }
        let req = self.req(&[x, scale, shift]);
        let v = self.push(r, d, out, req, Op::ModulateRows { x, scale, shift, rows_per });
        self.finite(v, "modulate_rows")
    }

    /// x + α_s⊙y, the adaLN-Zero gated residual.
    pub fn gated_add_rows(&mut self, x: Var, y: Var, alpha: Var, rows_per: usize) -> Result<Var> {
        let (r, d) = self.same_shape(x, y, "gated_add_rows")?;
        let b = self.per_sample_check("gated_add_rows", r, rows_per, alpha, alpha, d)?;
        let mut out = vec![0f32; r * d];
        {
            let xv = &self.nodes[x.0].data;
            let yv = &self.nodes[y.0].data;
            let al = &self.nodes[alpha.0].data;
            for s in 0..b {
                for rr in 0..rows_per {
                    let row = (s * rows_per + rr) * d;
                    for j in 0..d {
                        out[row + j] = al[s * d + j].mul_add(yv[row + j], xv[row + j]);
                    }
                }
            }
        }
        let req = self.req(&[x, y, alpha]);
        let v = self.push(r, d, out, req, Op::GatedAddRows { x, y, alpha, rows_per });
        self.finite(v, "gated_add_rows")
    }

    fn per_sample_check(&self, op: &'static str, rows: usize, rows_per: usize, a: Var, b: Var, d: usize) -> Result<usize> {
        if rows_per == 0 || rows % rows_per != 0 {
            return Err(Error::shape(op, format!("rows {rows} not divisible by rows_per {rows_per}")));
        }
        let batch = rows / rows_per;
        for v in [a, b] {
            if self.shape(v) != (batch, d) {
                return Err(Error::shape(op, format!("per-sample operand must be [{batch}×{d}]")));
            }
        }
        Ok(batch)
    }

    /// x[b·J + j] + tile[j]; the positional-embedding add.
    pub fn add_tiled_rows(&mut self, x: Var, t: Var) -> Result<Var> {
        let (r, d) = self.shape(x);
        let (tr, td) = self.shape(t);
        if td != d || tr == 0 || r % tr != 0 {
            return Err(Error::shape("add_tiled_rows", format!("x {r}×{d}, tile {tr}×{td}")));
        }
        let mut out = vec![0f32; r * d];
        {
            let xv = &self.nodes[x.0].data;
            let tv = &self.nodes[t.0].data;
            for i in 0..r {
                let j = i % tr;
                for c in 0..d {
                    out[i * d + c] = xv[i * d + c] + tv[j * d + c];
                }
            }
        }
        let req = self.req(&[x, t]);
        let v = self.push(r, d, out, req, Op::AddTiledRows { x, t });
        self.finite(v, "add_tiled_rows")
    }

    /// Gather rows of `table` by id; the class-embedding lookup.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!("embed_rows: id {bad} out of {r} rows")));
        }
        let mut out = vec![0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let req = self.req(&[table]);
        Ok(self.push(ids.len(), d, out, req, Op::EmbedRows { table, ids: ids.to_vec() }))
    }

    /// [a_0, b_0, a_1, b_1, …] — builds per-sample in-context token pairs.
    pub fn interleave_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, d) = self.same_shape(a, b, "interleave_rows")?;
        let mut out = vec![0f32; 2 * r * d];
        for i in 0..r {
            out[2 * i * d..(2 * i + 1) * d].copy_from_slice(&self.nodes[a.0].data[i * d..(i + 1) * d]);
            out[(2 * i + 1) * d..(2 * i + 2) * d].copy_from_slice(&self.nodes[b.0].data[i * d..(i + 1) * d]);
        }
        let req = self.req(&[a, b]);
        Ok(self.push(2 * r, d, out, req, Op::InterleaveRows { a, b }))
    }

    /// Keep rows [r0, r1) of each sample.
    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize, rows_per: usize) -> Result<Var> {
        let (r, d) = self.shape(x);
        if r0 >= r1 || r1 > rows_per || rows_per == 0 || r % rows_per != 0 {
            return Err(Error::shape("slice_rows", format!("[{r0},{r1}) of {rows_per}, rows {r}")));
        }
        let b = r / rows_per;
        let w = r1 - r0;
        let mut out = vec![0f32; b * w * d];
        for s in 0..b {
            let src = (s * rows_per + r0) * d;
            out[s * w * d..(s + 1) * w * d].copy_from_slice(&self.nodes[x.0].data[src..src + w * d]);
        }
        let req = self.req(&[x]);
        Ok(self.push(b * w, d, out, req, Op::SliceRows { x, r0, rows_per }))
    }

    /// Place each sample's rows at offset r0 inside a zero template of
    /// rows_per_out rows; the inverse of slice_rows.
    pub fn scatter_rows(&mut self, x: Var, r0: usize, rows_per_in: usize, rows_per_out: usize) -> Result<Var> {
        let (r, d) = self.shape(x);
        if rows_per_in == 0 || r % rows_per_in != 0 || r0 + rows_per_in > rows_per_out {
            return Err(Error::shape("scatter_rows", format!("rows {r}, in {rows_per_in}, out {rows_per_out} at {r0}")));
        }
        let b = r / rows_per_in;
        let mut out = vec![0f32; b * rows_per_out * d];
        for s in 0..b {
            let dst = (s * rows_per_out + r0) * d;
            out[dst..dst + rows_per_in * d]
                .copy_from_slice(&self.nodes[x.0].data[s * rows_per_in * d..(s + 1) * rows_per_in * d]);
        }
        let req = self.req(&[x]);
        Ok(self.push(b * rows_per_out, d, out, req, Op::ScatterRows { x, r0, rows_per_out }))
    }

    /// [B·J × p²·ch] tokens → [B × ch·H·W] images (channel-major pixels),
    /// with the fixed within-patch order (row, col, channel).
    pub fn unpatchify(&mut self, x: Var, p: usize, gh: usize, gw: usize, ch: usize) -> Result<Var> {
        let (r, w) = self.shape(x);
        let j = gh * gw;
        if w != p * p * ch || j == 0 || r % j != 0 {
            return Err(Error::shape("unpatchify", format!("{r}×{w} tokens for p={p}, grid {gh}×{gw}, ch={ch}")));
        }
        let b = r / j;
        let (hh, ww) = (gh * p, gw * p);
        let mut out = vec![0f32; b * ch * hh * ww];
        let xv = &self.nodes[x.0].data;
        for s in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = (s * j + gy * gw + gx) * w;
                    for py in 0..p {
                        for px in 0..p {
                            for c in 0..ch {
                                let y = gy * p + py;
                                let xx = gx * p + px;
                                out[s * ch * hh * ww + c * hh * ww + y * ww + xx] =
                                    xv[tok + (py * p + px) * ch + c];
                            }
                        }
                    }
                }
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(b, ch * hh * ww, out, req, Op::Unpatchify { x, p, gh, gw, ch }))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    fn add_grad(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].requires {
            return;
        }
        let n = &mut self.nodes[v.0];
        let g = g_or_zeros(&mut n.grad, n.data.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<*mut [f32]> {
        if !self.nodes[v.0].requires {
            return None;
        }
        let n = &mut self.nodes[v.0];
        Some(g_or_zeros(&mut n.grad, n.data.len()) as *mut [f32])
    }

    /// Populate grads of every reachable requires-grad node, then retire the
    /// record: a second backward without a fresh forward is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Invalid("backward: record already consumed; re-run forward".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Invalid("backward: loss must be a [1×1] scalar".into()));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_one(i, &op)?;
        }
        // Drop remaining op payloads: the record is cleared either way.
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        Ok(())
    }

    fn backprop_one(&mut self, i: usize, op: &Op) -> Result<()> {
        let g = self.nodes[i].grad.clone().expect("grad present");
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(a);
                let n = cols;
                if self.nodes[a.0].requires {
                    let bdat = self.nodes[b.0].data.clone();
                    if let Some(ga) = self.grad_buf(a) {
                        let ga = unsafe { &mut *ga };
                        gemm(ga, &g, &bdat, m, n, k, false, true, true);
                    }
                }
                if self.nodes[b.0].requires {
                    let adat = self.nodes[a.0].data.clone();
                    if let Some(gb) = self.grad_buf(b) {
                        let gb = unsafe { &mut *gb };
                        gemm(gb, &adat, &g, k, m, n, true, false, true);
                    }
                }
            }
            Op::Add { a, b } => {
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Sub { a, b } => {
                self.add_grad(a, &g);
                let neg: Vec<f32> = g.iter().map(|x| -x).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f32> = g.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                let db: Vec<f32> = g.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::MaxElem { a, b } => {
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                let da: Vec<f32> = g.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| if x >= y { *g } else { 0.0 }).collect();
                let db: Vec<f32> = g.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| if x >= y { 0.0 } else { *g }).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f32> = g.iter().map(|g| g * c).collect();
                self.add_grad(a, &da);
            }
            Op::AddConst { a } => self.add_grad(a, &g),
            Op::Exp { a } => {
                let da: Vec<f32> = g.iter().zip(&self.nodes[i].data).map(|(g, o)| g * o).collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f32> = g.iter().zip(&self.nodes[i].data).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.add_grad(a, &da);
            }
            Op::Silu { a } => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::ReluSq { a } => {
                let da: Vec<f32> = g.iter().zip(&self.nodes[a.0].data).map(|(g, &x)| g * 2.0 * x.max(0.0)).collect();
                self.add_grad(a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f32> = g.iter().zip(&self.nodes[i].data).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.add_grad(a, &da);
            }
            Op::Transpose { a } => {
                let (ar, ac) = self.shape(a);
                let mut da = vec![0f32; ar * ac];
                for r in 0..rows {
                    for c in 0..cols {
                        da[c * ac + r] = g[r * cols + c];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Reshape { a } => self.add_grad(a, &g),
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len().max(1);
                let da = vec![g[0] / n as f32; self.nodes[a.0].data.len()];
                self.add_grad(a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.add_grad(a, &da);
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].data.len().max(1);
                let c = 2.0 * g[0] / n as f32;
                let da: Vec<f32> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                let db: Vec<f32> = da.iter().map(|x| -x).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::ConcatCols { a, b } => {
                let (_, ca) = self.shape(a);
                let (_, cb) = self.shape(b);
                let mut da = vec![0f32; rows * ca];
                let mut db = vec![0f32; rows * cb];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * cols..r * cols + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * cols + ca..(r + 1) * cols]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::SliceCols { a, c0 } => {
                let (ar, ac) = self.shape(a);
                let mut da = vec![0f32; ar * ac];
                for r in 0..rows {
                    da[r * ac + c0..r * ac + c0 + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, ref saved } => {
                let d = cols;
                let xv = self.nodes[x.0].data.clone();
                let gav = self.nodes[gamma.0].data.clone();
                let mut dx = vec![0f32; rows * d];
                let mut dgamma = vec![0f32; d];
                let mut dbeta = vec![0f32; d];
                for r in 0..rows {
                    let (mean, rstd) = (saved[2 * r], saved[2 * r + 1]);
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut sum_gh = 0f64;
                    let mut sum_ghx = 0f64;
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        let gh = grow[j] * gav[j];
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                        sum_gh += gh as f64;
                        sum_ghx += (gh * xh) as f64;
                    }
                    let mg = (sum_gh / d as f64) as f32;
                    let mgx = (sum_ghx / d as f64) as f32;
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        let gh = grow[j] * gav[j];
                        dx[r * d + j] = rstd * (gh - mg - xh * mgx);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::TokenInterp { x, xs, mu } => {
                let d = cols;
                let mv = self.nodes[mu.0].data.clone();
                let xv = self.nodes[x.0].data.clone();
                let sv = self.nodes[xs.0].data.clone();
                let mut dx = vec![0f32; rows * d];
                let mut ds = vec![0f32; rows * d];
                let mut dmu = vec![0f32; d];
                for r in 0..rows {
                    for j in 0..d {
                        let idx = r * d + j;
                        let m = mv[j].clamp(0.0, 1.0);
                        dx[idx] = g[idx] * m;
                        ds[idx] = g[idx] * (1.0 - m);
                        if mv[j] > 0.0 && mv[j] < 1.0 {
                            dmu[j] += g[idx] * (xv[idx] - sv[idx]);
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(xs, &ds);
                self.add_grad(mu, &dmu);
            }
            Op::QuadShift { x, gh, gw, rows_per, skip } => {
                // Transpose of the fixed gather: each output group read from a
                // neighbor, so that neighbor's grad row accumulates this group.
                let d = cols;
                let q = d / 4;
                let b = rows / rows_per;
                let mut dx = vec![0f32; rows * d];
                for s in 0..b {
                    let base = s * rows_per;
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let orow = (base + skip + gy * gw + gx) * d;
                            let mut give = |grp: usize, ny: isize, nx: isize| {
                                if ny >= 0 && nx >= 0 && (ny as usize) < gh && (nx as usize) < gw {
                                    let src = (base + skip + ny as usize * gw + nx as usize) * d;
                                    for j in grp * q..(grp + 1) * q {
                                        dx[src + j] += g[orow + j];
                                    }
                                }
                            };
                            give(0, gy as isize - 1, gx as isize);
                            give(1, gy as isize + 1, gx as isize);
                            give(2, gy as isize, gx as isize - 1);
                            give(3, gy as isize, gx as isize + 1);
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Wkv { k, v, w, u, rows_per, bidirectional, normalize } => {
                let d = cols;
                let params = WkvParams {
                    w: self.nodes[w.0].data.clone(),
                    u: self.nodes[u.0].data.clone(),
                    normalize_decay: normalize,
                };
                let kv = self.nodes[k.0].data.clone();
                let vv = self.nodes[v.0].data.clone();
                // Per-sample adjoints computed in parallel into disjoint
                // buffers; dw/du partials reduced in ascending sample order.
                let parts: Result<Vec<_>> = kv
                    .par_chunks(rows_per * d)
                    .zip(vv.par_chunks(rows_per * d))
                    .zip(g.par_chunks(rows_per * d))
                    .map(|((kc, vc), gc)| wkv_backward(kc, vc, &params, gc, rows_per, d, bidirectional))
                    .collect();
                let parts = parts?;
                let mut dk = vec![0f32; rows * d];
                let mut dv = vec![0f32; rows * d];
                let mut dw = vec![0f32; d];
                let mut du = vec![0f32; d];
                for (s, (pk, pv, pw, pu)) in parts.into_iter().enumerate() {
                    dk[s * rows_per * d..(s + 1) * rows_per * d].copy_from_slice(&pk);
                    dv[s * rows_per * d..(s + 1) * rows_per * d].copy_from_slice(&pv);
                    for c in 0..d {
                        dw[c] += pw[c];
                        du[c] += pu[c];
                    }
                }
                self.add_grad(k, &dk);
                self.add_grad(v, &dv);
                self.add_grad(w, &dw);
                self.add_grad(u, &du);
            }
            Op::ModulateRows { x, scale, shift, rows_per } => {
                let d = cols;
                let b = rows / rows_per;
                let xv = self.nodes[x.0].data.clone();
                let sc = self.nodes[scale.0].data.clone();
                let mut dx = vec![0f32; rows * d];
                let mut dscale = vec![0f32; b * d];
                let mut dshift = vec![0f32; b * d];
                for s in 0..b {
                    for rr in 0..rows_per {
                        let row = (s * rows_per + rr) * d;
                        for j in 0..d {
                            dx[row + j] = g[row + j] * (1.0 + sc[s * d + j]);
                            dscale[s * d + j] += g[row + j] * xv[row + j];
                            dshift[s * d + j] += g[row + j];
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(scale, &dscale);
                self.add_grad(shift, &dshift);
            }
            Op::GatedAddRows { x, y, alpha, rows_per } => {
                let d = cols;
                let b = rows / rows_per;
                let yv = self.nodes[y.0].data.clone();
                let al = self.nodes[alpha.0].data.clone();
                let mut dy = vec![0f32; rows * d];
                let mut dalpha = vec![0f32; b * d];
                for s in 0..b {
                    for rr in 0..rows_per {
                        let row = (s * rows_per + rr) * d;
                        for j in 0..d {
                            dy[row + j] = g[row + j] * al[s * d + j];
                            dalpha[s * d + j] += g[row + j] * yv[row + j];
                        }
                    }
                }
                self.add_grad(x, &g);
                self.add_grad(y, &dy);
                self.add_grad(alpha, &dalpha);
            }
            Op::AddTiledRows { x, t } => {
                let (tr, td) = self.shape(t);
                let mut dt = vec![0f32; tr * td];
                for i in 0..rows {
                    let j = i % tr;
                    for c in 0..cols {
                        dt[j * td + c] += g[i * cols + c];
                    }
                }
                self.add_grad(x, &g);
                self.add_grad(t, &dt);
            }
            Op::EmbedRows { table, ref ids } => {
                let (tr, td) = self.shape(table);
                let mut dt = vec![0f32; tr * td];
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..td {
                        dt[id * td + c] += g[i * td + c];
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::InterleaveRows { a, b } => {
                let (ar, d) = self.shape(a);
                let mut da = vec![0f32; ar * d];
                let mut db = vec![0f32; ar * d];
                for i in 0..ar {
                    da[i * d..(i + 1) * d].copy_from_slice(&g[2 * i * d..(2 * i + 1) * d]);
                    db[i * d..(i + 1) * d].copy_from_slice(&g[(2 * i + 1) * d..(2 * i + 2) * d]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::SliceRows { x, r0, rows_per } => {
                let (xr, d) = self.shape(x);
                let b = xr / rows_per;
                let w = rows / b;
                let mut dx = vec![0f32; xr * d];
                for s in 0..b {
                    let dst = (s * rows_per + r0) * d;
                    dx[dst..dst + w * d].copy_from_slice(&g[s * w * d..(s + 1) * w * d]);
                }
                self.add_grad(x, &dx);
            }
            Op::ScatterRows { x, r0, rows_per_out } => {
                let (xr, d) = self.shape(x);
                let rows_per_in = xr / (rows / rows_per_out);
                let b = rows / rows_per_out;
                let mut dx = vec![0f32; xr * d];
                for s in 0..b {
                    let src = (s * rows_per_out + r0) * d;
                    dx[s * rows_per_in * d..(s + 1) * rows_per_in * d]
                        .copy_from_slice(&g[src..src + rows_per_in * d]);
                }
                self.add_grad(x, &dx);
            }
            Op::Unpatchify { x, p, gh, gw, ch } => {
                let (xr, xw) = self.shape(x);
                let j = gh * gw;
                let b = xr / j;
                let (hh, ww) = (gh * p, gw * p);
                let mut dx = vec![0f32; xr * xw];
                for s in 0..b {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let tok = (s * j + gy * gw + gx) * xw;
                            for py in 0..p {
                                for px in 0..p {
                                    for c in 0..ch {
                                        let y = gy * p + py;
                                        let xx = gx * p + px;
                                        dx[tok + (py * p + px) * ch + c] =
                                            g[s * cols + c * hh * ww + y * ww + xx];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
        }
        Ok(())
    }
}

fn g_or_zeros(slot: &mut Option<Vec<f32>>, n: usize) -> &mut [f32] {
    slot.get_or_insert_with(|| vec![0f32; n])
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
