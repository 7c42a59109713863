//! Dense f32 tensors and the matrix-multiply kernel everything runs on.
//!
//! Accumulation semantics are part of the contract: every output element is a
//! fused-multiply-add chain over strictly ascending k, so results are
//! bit-identical across the tiled fast path, the narrow fallback, and any
//! thread count (parallelism only ever splits disjoint output tiles).

use crate::error::{Error, Result};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

// ─── GEMM ───────────────────────────────────────────────────────────────────

const LANES: usize = 16;
type V = [f32; LANES];

#[inline(always)]
fn vload(s: &[f32]) -> V {
    let mut v = [0f32; LANES];
    v.copy_from_slice(&s[..LANES]);
    v
}

#[inline(always)]
fn vfma(acc: V, a: f32, b: V) -> V {
    let mut o = [0f32; LANES];
    for l in 0..LANES {
        o[l] = a.mul_add(b[l], acc[l]);
    }
    o
}

/// Logical element of `a` treated as [m×k] (transposed view when `ta`).
#[inline(always)]
fn a_at(a: &[f32], m: usize, k: usize, ta: bool, i: usize, kk: usize) -> f32 {
    if ta {
        a[kk * m + i]
    } else {
        a[i * k + kk]
    }
}

#[inline(always)]
fn b_at(b: &[f32], k: usize, n: usize, tb: bool, kk: usize, j: usize) -> f32 {
    if tb {
        b[j * k + kk]
    } else {
        b[kk * n + j]
    }
}

/// `out[i,j] = (out[i,j] if acc else 0) + Σ_k A[i,k]·B[k,j]`, fma-chained in
/// ascending k. `a` is [m×k] ([k×m] when `ta`); `b` is [k×n] ([n×k] when `tb`).
pub fn gemm(
    out: &mut [f32],
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    acc: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(out.len(), m * n, "gemm: out buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !acc {
            out.fill(0.0);
        }
        return;
    }
    if n < LANES {
        return gemm_narrow(out, a, b, m, k, n, ta, tb, acc);
    }

    // Pack A into 4-row k-major tiles and B into 64-column panels, zero-padded
    // to full tiles. Zero pads are inert: fma(0, 0, s) == s exactly.
    let mp = m.div_ceil(4) * 4;
    let np = n.div_ceil(64) * 64;
    let mut apack = vec![0f32; mp * k];
    for t in 0..mp / 4 {
        let dst = &mut apack[t * 4 * k..(t + 1) * 4 * k];
        for r in 0..4 {
            let i = t * 4 + r;
            if i < m {
                for kk in 0..k {
                    dst[kk * 4 + r] = a_at(a, m, k, ta, i, kk);
                }
            }
        }
    }
    let mut bpack = vec![0f32; k * np];
    for p in 0..np / 64 {
        let dst = &mut bpack[p * k * 64..(p + 1) * k * 64];
        let j0 = p * 64;
        let w = 64.min(n - j0);
        if tb {
            for (jj, col) in (j0..j0 + w).enumerate() {
                for kk in 0..k {
                    dst[kk * 64 + jj] = b[col * k + kk];
                }
            }
        } else {
            for kk in 0..k {
                dst[kk * 64..kk * 64 + w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
            }
        }
    }

    // Each 4-row band of `out` is an independent task.
    out.par_chunks_mut(4 * n).enumerate().for_each(|(t, band)| {
        let rows = band.len() / n;
        let ap = &apack[t * 4 * k..(t + 1) * 4 * k];
        let mut ctile = [0f32; 4 * 64];
        for p in 0..np / 64 {
            let bp = &bpack[p * k * 64..(p + 1) * k * 64];
            let j0 = p * 64;
            let w = 64.min(n - j0);
            kernel_4x64(ap, bp, k, &mut ctile);
            for r in 0..rows {
                let dst = &mut band[r * n + j0..r * n + j0 + w];
                let src = &ctile[r * 64..r * 64 + w];
                if acc {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    });
}

/// 4×64 register tile. The 16 named accumulators stay in vector registers;
/// an indexed 2-D array here defeats scalar promotion and spills.
#[inline(always)]
fn kernel_4x64(ap: &[f32], bp: &[f32], k: usize, ctile: &mut [f32; 256]) {
    let z = [0f32; LANES];
    let (mut a0, mut a1, mut a2, mut a3) = (z, z, z, z);
    let (mut b0, mut b1, mut b2, mut b3) = (z, z, z, z);
    let (mut c0, mut c1, mut c2, mut c3) = (z, z, z, z);
    let (mut d0, mut d1, mut d2, mut d3) = (z, z, z, z);
    for kk in 0..k {
        let brow = &bp[kk * 64..kk * 64 + 64];
        let v0 = vload(&brow[0..]);
        let v1 = vload(&brow[16..]);
        let v2 = vload(&brow[32..]);
        let v3 = vload(&brow[48..]);
        let arow = &ap[kk * 4..kk * 4 + 4];
        let (s0, s1, s2, s3) = (arow[0], arow[1], arow[2], arow[3]);
        a0 = vfma(a0, s0, v0);
        a1 = vfma(a1, s0, v1);
        a2 = vfma(a2, s0, v2);
        a3 = vfma(a3, s0, v3);
        b0 = vfma(b0, s1, v0);
        b1 = vfma(b1, s1, v1);
        b2 = vfma(b2, s1, v2);
        b3 = vfma(b3, s1, v3);
        c0 = vfma(c0, s2, v0);
        c1 = vfma(c1, s2, v1);
        c2 = vfma(c2, s2, v2);
        c3 = vfma(c3, s2, v3);
        d0 = vfma(d0, s3, v0);
        d1 = vfma(d1, s3, v1);
        d2 = vfma(d2, s3, v2);
        d3 = vfma(d3, s3, v3);
    }
    for (r, row) in [[a0, a1, a2, a3], [b0, b1, b2, b3], [c0, c1, c2, c3], [d0, d1, d2, d3]]
        .into_iter()
        .enumerate()
    {
        for (q, v) in row.into_iter().enumerate() {
            ctile[r * 64 + q * 16..r * 64 + q * 16 + 16].copy_from_slice(&v);
        }
    }
}

/// Fallback for n < 16: same ascending-k fma chain per element, so it is
/// bitwise identical to the tiled path on shapes both could handle.
fn gemm_narrow(
    out: &mut [f32],
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    acc: bool,
) {
    if !acc {
        out.fill(0.0);
    }
    for i in 0..m {
        let mut row = vec![0f32; n];
        for kk in 0..k {
            let aik = a_at(a, m, k, ta, i, kk);
            for (j, r) in row.iter_mut().enumerate() {
                *r = aik.mul_add(b_at(b, k, n, tb, kk, j), *r);
            }
        }
        for (o, r) in out[i * n..i * n + n].iter_mut().zip(&row) {
            *o += *r;
        }
    }
}

pub fn gemm_alloc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    gemm(&mut out, a, b, m, k, n, ta, tb, false);
    out
}
