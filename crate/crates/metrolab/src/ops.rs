//! Primitive tensor operations with recorded backward passes.
//!
//! Shapes are checked up front; kernels are plain row-major loops arranged so
//! the inner dimension is contiguous. Each op pushes at most one closure onto
//! the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::elem::{ef, Elem};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn shape_err<E: Elem>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

// ---------------------------------------------------------------------------
// matmul kernels (used by forward and backward)
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
fn mm<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T  (rows of both operands are contiguous)
fn mm_nt<E: Elem>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn mm_tn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (j, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[j * n..(j + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// element-wise ops
// ---------------------------------------------------------------------------

pub fn add<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a, b));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = tape.output(a.shape().to_vec(), data, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (aid, arg) = (a.id(), a.requires_grad());
        let (bid, brg) = (b.id(), b.requires_grad());
        let oid = out.id();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                if arg {
                    g.accumulate(aid, go.clone());
                }
                if brg {
                    g.accumulate(bid, go);
                }
            }
        }));
    }
    Ok(out)
}

/// Add `b` cyclically into `a`; `b.len()` must divide `a.len()`. Covers bias
/// rows, positional tables over a batch, and shared attention biases.
pub fn add_tiled<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let tile = b.len();
    if tile == 0 || a.len() % tile != 0 {
        return Err(shape_err("add_tiled", a, b));
    }
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + bd[i % tile])
        .collect();
    let out = tape.output(a.shape().to_vec(), data, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (aid, arg) = (a.id(), a.requires_grad());
        let (bid, brg) = (b.id(), b.requires_grad());
        let oid = out.id();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                if brg {
                    let mut gb = vec![E::zero(); tile];
                    for (i, &v) in go.iter().enumerate() {
                        let slot = &mut gb[i % tile];
                        *slot = *slot + v;
                    }
                    g.accumulate(bid, gb);
                }
                if arg {
                    g.accumulate(aid, go);
                }
            }
        }));
    }
    Ok(out)
}

pub fn mul<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a, b));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = tape.output(a.shape().to_vec(), data, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (aid, arg, ad) = (a.id(), a.requires_grad(), a.data_arc());
        let (bid, brg, bd) = (b.id(), b.requires_grad(), b.data_arc());
        let oid = out.id();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                if arg {
                    let ga = go.iter().zip(bd.iter()).map(|(&v, &y)| v * y).collect();
                    g.accumulate(aid, ga);
                }
                if brg {
                    let gb = go.iter().zip(ad.iter()).map(|(&v, &x)| v * x).collect();
                    g.accumulate(bid, gb);
                }
            }
        }));
    }
    Ok(out)
}

pub fn scale<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, c: f64) -> Tensor<E> {
    let ce = ef::<E>(c);
    let data = a.data().iter().map(|&x| x * ce).collect();
    let out = tape.output(a.shape().to_vec(), data, a.requires_grad());
    if out.requires_grad() {
        let (aid, oid) = (a.id(), out.id());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let ga = go.into_iter().map(|v| v * ce).collect();
                g.accumulate(aid, ga);
            }
        }));
    }
    out
}

pub fn relu<E: Elem>(tape: &Tape<E>, a: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = a
        .data()
        .iter()
        .map(|&x| if x > E::zero() { x } else { E::zero() })
        .collect();
    let out = tape.output(a.shape().to_vec(), data, a.requires_grad());
    if out.requires_grad() {
        let (aid, oid, ad) = (a.id(), out.id(), a.data_arc());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let ga = go
                    .into_iter()
                    .zip(ad.iter())
                    .map(|(v, &x)| if x > E::zero() { v } else { E::zero() })
                    .collect();
                g.accumulate(aid, ga);
            }
        }));
    }
    out
}

/// Seeded inverted dropout. Identity when `p == 0`.
pub fn dropout<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, p: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    if p <= 0.0 {
        return a.clone();
    }
    assert!(p < 1.0, "dropout probability must be < 1");
    let keep = 1.0 - p;
    let factors: Vec<E> = (0..a.len())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                E::from_f64(1.0 / keep)
            } else {
                E::zero()
            }
        })
        .collect();
    let data = a
        .data()
        .iter()
        .zip(&factors)
        .map(|(&x, &f)| x * f)
        .collect();
    let out = tape.output(a.shape().to_vec(), data, a.requires_grad());
    if out.requires_grad() {
        let (aid, oid) = (a.id(), out.id());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let ga = go
                    .into_iter()
                    .zip(&factors)
                    .map(|(v, &f)| v * f)
                    .collect();
                g.accumulate(aid, ga);
            }
        }));
    }
    out
}

pub fn sum_all<E: Elem>(tape: &Tape<E>, a: &Tensor<E>) -> Tensor<E> {
    let total: f64 = a.data().iter().map(|x| x.to_f64()).sum();
    let out = tape.output(vec![1], vec![E::from_f64(total)], a.requires_grad());
    if out.requires_grad() {
        let (aid, oid, n) = (a.id(), out.id(), a.len());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                g.accumulate(aid, vec![go[0]; n]);
            }
        }));
    }
    out
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

pub fn reshape<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, shape: Vec<usize>) -> Result<Tensor<E>> {
    let numel: usize = shape.iter().product();
    if numel != a.len() {
        return Err(Error::Contract(format!(
            "reshape {:?} -> {:?} changes element count",
            a.shape(),
            shape
        )));
    }
    let out = tape.output(shape, a.data().to_vec(), a.requires_grad());
    if out.requires_grad() {
        let (aid, oid) = (a.id(), out.id());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                g.accumulate(aid, go);
            }
        }));
    }
    Ok(out)
}

/// Swap the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose_last2<E: Elem>(tape: &Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let rank = a.shape().len();
    if rank != 2 && rank != 3 {
        return Err(Error::Contract(format!(
            "transpose_last2 expects rank 2 or 3, got {:?}",
            a.shape()
        )));
    }
    let (batch, m, n) = match a.shape() {
        [m, n] => (1usize, *m, *n),
        [b, m, n] => (*b, *m, *n),
        _ => unreachable!(),
    };
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);

    let transpose_kernel = move |src: &[E]| {
        let mut dst = vec![E::zero(); src.len()];
        for b in 0..batch {
            let s = &src[b * m * n..(b + 1) * m * n];
            let d = &mut dst[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    d[j * m + i] = s[i * n + j];
                }
            }
        }
        dst
    };
    let data = transpose_kernel(a.data());
    let out = tape.output(shape, data, a.requires_grad());
    if out.requires_grad() {
        let (aid, oid) = (a.id(), out.id());
        // transposing back swaps (m, n)
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let mut ga = vec![E::zero(); go.len()];
                for b in 0..batch {
                    let s = &go[b * m * n..(b + 1) * m * n];
                    let d = &mut ga[b * m * n..(b + 1) * m * n];
                    for j in 0..n {
                        for i in 0..m {
                            d[i * n + j] = s[j * m + i];
                        }
                    }
                }
                g.accumulate(aid, ga);
            }
        }));
    }
    Ok(out)
}

/// [batch, seq, heads*head_dim] -> [batch*heads, seq, head_dim]
pub fn split_heads<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, heads: usize) -> Result<Tensor<E>> {
    let (b, n, d) = match a.shape() {
        [b, n, d] => (*b, *n, *d),
        _ => {
            return Err(Error::Contract(format!(
                "split_heads expects rank 3, got {:?}",
                a.shape()
            )))
        }
    };
    if d % heads != 0 {
        return Err(Error::Contract(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;
    let src = a.data();
    let mut data = vec![E::zero(); src.len()];
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..heads {
                let src_off = (bi * n + ni) * d + hi * hd;
                let dst_off = ((bi * heads + hi) * n + ni) * hd;
                data[dst_off..dst_off + hd].copy_from_slice(&src[src_off..src_off + hd]);
            }
        }
    }
    let out = tape.output(vec![b * heads, n, hd], data, a.requires_grad());
    if out.requires_grad() {
        let (aid, oid) = (a.id(), out.id());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let mut ga = vec![E::zero(); go.len()];
                for bi in 0..b {
                    for ni in 0..n {
                        for hi in 0..heads {
                            let a_off = (bi * n + ni) * (heads * hd) + hi * hd;
                            let o_off = ((bi * heads + hi) * n + ni) * hd;
                            ga[a_off..a_off + hd].copy_from_slice(&go[o_off..o_off + hd]);
                        }
                    }
                }
                g.accumulate(aid, ga);
            }
        }));
    }
    Ok(out)
}

/// [batch*heads, seq, head_dim] -> [batch, seq, heads*head_dim]
pub fn merge_heads<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, heads: usize) -> Result<Tensor<E>> {
    let (bh, n, hd) = match a.shape() {
        [bh, n, hd] => (*bh, *n, *hd),
        _ => {
            return Err(Error::Contract(format!(
                "merge_heads expects rank 3, got {:?}",
                a.shape()
            )))
        }
    };
    if bh % heads != 0 {
        return Err(Error::Contract(format!(
            "batch*heads dim {bh} not divisible by {heads} heads"
        )));
    }
    let b = bh / heads;
    let d = heads * hd;
    let src = a.data();
    let mut data = vec![E::zero(); src.len()];
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..heads {
                let src_off = ((bi * heads + hi) * n + ni) * hd;
                let dst_off = (bi * n + ni) * d + hi * hd;
                data[dst_off..dst_off + hd].copy_from_slice(&src[src_off..src_off + hd]);
            }
        }
    }
    let out = tape.output(vec![b, n, d], data, a.requires_grad());
    if out.requires_grad() {
        let (aid, oid) = (a.id(), out.id());
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let mut ga = vec![E::zero(); go.len()];
                for bi in 0..b {
                    for ni in 0..n {
                        for hi in 0..heads {
                            let a_off = ((bi * heads + hi) * n + ni) * hd;
                            let o_off = (bi * n + ni) * d + hi * hd;
                            ga[a_off..a_off + hd].copy_from_slice(&go[o_off..o_off + hd]);
                        }
                    }
                }
                g.accumulate(aid, ga);
            }
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

pub fn matmul<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        _ => return Err(shape_err("matmul", a, b)),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        _ => return Err(shape_err("matmul", a, b)),
    };
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let data = mm(a.data(), b.data(), m, k, n);
    let out = tape.output(vec![m, n], data, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (aid, arg, ad) = (a.id(), a.requires_grad(), a.data_arc());
        let (bid, brg, bd) = (b.id(), b.requires_grad(), b.data_arc());
        let oid = out.id();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                if arg {
                    g.accumulate(aid, mm_nt(&go, &bd, m, n, k));
                }
                if brg {
                    g.accumulate(bid, mm_tn(&ad, &go, m, k, n));
                }
            }
        }));
    }
    Ok(out)
}

/// Batched matmul over rank-3 tensors with equal batch dims.
pub fn bmm<E: Elem>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ba, m, k) = match a.shape() {
        [ba, m, k] => (*ba, *m, *k),
        _ => return Err(shape_err("bmm", a, b)),
    };
    let (bb, k2, n) = match b.shape() {
        [bb, k2, n] => (*bb, *k2, *n),
        _ => return Err(shape_err("bmm", a, b)),
    };
    if ba != bb || k != k2 {
        return Err(shape_err("bmm", a, b));
    }
    let mut data = vec![E::zero(); ba * m * n];
    for i in 0..ba {
        let c = mm(&a.data()[i * m * k..(i + 1) * m * k], &b.data()[i * k * n..(i + 1) * k * n], m, k, n);
        data[i * m * n..(i + 1) * m * n].copy_from_slice(&c);
    }
    let out = tape.output(vec![ba, m, n], data, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (aid, arg, ad) = (a.id(), a.requires_grad(), a.data_arc());
        let (bid, brg, bd) = (b.id(), b.requires_grad(), b.data_arc());
        let oid = out.id();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                if arg {
                    let mut ga = vec![E::zero(); ba * m * k];
                    for i in 0..ba {
                        let c = mm_nt(&go[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], m, n, k);
                        ga[i * m * k..(i + 1) * m * k].copy_from_slice(&c);
                    }
                    g.accumulate(aid, ga);
                }
                if brg {
                    let mut gb = vec![E::zero(); ba * k * n];
                    for i in 0..ba {
                        let c = mm_tn(&ad[i * m * k..(i + 1) * m * k], &go[i * m * n..(i + 1) * m * n], m, k, n);
                        gb[i * k * n..(i + 1) * k * n].copy_from_slice(&c);
                    }
                    g.accumulate(bid, gb);
                }
            }
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// lookups, normalization, softmax
// ---------------------------------------------------------------------------

/// Gather rows of `table[rows, width]` by id. Backward scatter-adds into the
/// table, so repeated ids accumulate.
pub fn embedding_lookup<E: Elem>(tape: &Tape<E>, table: &Tensor<E>, ids: &[u32]) -> Result<Tensor<E>> {
    let (rows, width) = match table.shape() {
        [r, w] => (*r, *w),
        _ => {
            return Err(Error::Contract(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape()
            )))
        }
    };
    let mut data = vec![E::zero(); ids.len() * width];
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= rows {
            return Err(Error::VocabRange { id, vocab: rows });
        }
        data[i * width..(i + 1) * width].copy_from_slice(&table.data()[id * width..(id + 1) * width]);
    }
    let out = tape.output(vec![ids.len(), width], data, table.requires_grad());
    if out.requires_grad() {
        let (tid, oid) = (table.id(), out.id());
        let ids = ids.to_vec();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let mut gt = vec![E::zero(); rows * width];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * width..(id as usize + 1) * width];
                    let src = &go[i * width..(i + 1) * width];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                g.accumulate(tid, gt);
            }
        }));
    }
    Ok(out)
}

/// Standardize over the last dimension, then scale and shift.
pub fn layer_norm<E: Elem>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let d = *x.shape().last().ok_or_else(|| Error::Contract("layer_norm on rank-0 tensor".into()))?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.len() / d;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut data = vec![E::zero(); x.len()];
    let mut xhat = vec![0.0f64; x.len()];
    let mut inv_std = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let xh = (row[j].to_f64() - mean) * istd;
            xhat[r * d + j] = xh;
            data[r * d + j] = E::from_f64(xh * gd[j].to_f64() + bd[j].to_f64());
        }
    }
    let any = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    let out = tape.output(x.shape().to_vec(), data, any);
    if out.requires_grad() {
        let (xid, xrg) = (x.id(), x.requires_grad());
        let (gid, grg, gdc) = (gain.id(), gain.requires_grad(), gain.data_arc());
        let (bid, brg) = (bias.id(), bias.requires_grad());
        let oid = out.id();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                if grg {
                    let mut gg = vec![E::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let v = gg[j].to_f64() + go[r * d + j].to_f64() * xhat[r * d + j];
                            gg[j] = E::from_f64(v);
                        }
                    }
                    g.accumulate(gid, gg);
                }
                if brg {
                    let mut gb = vec![E::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let v = gb[j].to_f64() + go[r * d + j].to_f64();
                            gb[j] = E::from_f64(v);
                        }
                    }
                    g.accumulate(bid, gb);
                }
                if xrg {
                    let mut gx = vec![E::zero(); rows * d];
                    for r in 0..rows {
                        // dy/dx through standardization: let t = gain * go;
                        // dx = istd * (t - mean(t) - xhat * mean(t * xhat))
                        let mut mean_t = 0.0f64;
                        let mut mean_tx = 0.0f64;
                        for j in 0..d {
                            let t = gdc[j].to_f64() * go[r * d + j].to_f64();
                            mean_t += t;
                            mean_tx += t * xhat[r * d + j];
                        }
                        mean_t /= d as f64;
                        mean_tx /= d as f64;
                        for j in 0..d {
                            let t = gdc[j].to_f64() * go[r * d + j].to_f64();
                            let v = inv_std[r] * (t - mean_t - xhat[r * d + j] * mean_tx);
                            gx[r * d + j] = E::from_f64(v);
                        }
                    }
                    g.accumulate(xid, gx);
                }
            }
        }));
    }
    Ok(out)
}

/// Softmax over the last dimension (max-subtracted for stability).
pub fn softmax_last<E: Elem>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    let d = *x.shape().last().expect("softmax on rank-0 tensor");
    let rows = x.len() / d;
    let xd = x.data();
    let mut data = vec![E::zero(); x.len()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let mut denom = 0.0f64;
        for j in 0..d {
            let e = (row[j].to_f64() - max).exp();
            data[r * d + j] = E::from_f64(e);
            denom += e;
        }
        for j in 0..d {
            data[r * d + j] = E::from_f64(data[r * d + j].to_f64() / denom);
        }
    }
    let out = tape.output(x.shape().to_vec(), data, x.requires_grad());
    if out.requires_grad() {
        let (xid, oid) = (x.id(), out.id());
        let y = out.data_arc();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let mut gx = vec![E::zero(); go.len()];
                for r in 0..rows {
                    let mut dot = 0.0f64;
                    for j in 0..d {
                        dot += go[r * d + j].to_f64() * y[r * d + j].to_f64();
                    }
                    for j in 0..d {
                        let v = y[r * d + j].to_f64() * (go[r * d + j].to_f64() - dot);
                        gx[r * d + j] = E::from_f64(v);
                    }
                }
                g.accumulate(xid, gx);
            }
        }));
    }
    out
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean of -log softmax(logits)[target] over positions where `loss_mask` is
/// true. An all-false mask yields exactly 0 with zero gradient.
pub fn softmax_cross_entropy<E: Elem>(
    tape: &Tape<E>,
    logits: &Tensor<E>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<Tensor<E>> {
    let (rows, vocab) = match logits.shape() {
        [r, v] => (*r, *v),
        _ => {
            return Err(Error::Contract(format!(
                "cross entropy expects rank-2 logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if targets.len() != rows || loss_mask.len() != rows {
        return Err(Error::Contract(format!(
            "cross entropy alignment: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            loss_mask.len()
        )));
    }
    for (&t, &m) in targets.iter().zip(loss_mask) {
        if m && t as usize >= vocab {
            return Err(Error::VocabRange { id: t as usize, vocab });
        }
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        // Empty-mask convention: contributes nothing, no gradient.
        return Ok(tape.output(vec![1], vec![E::zero()], false));
    }
    let xd = logits.data();
    let mut probs = vec![0.0f64; rows * vocab];
    let mut total = 0.0f64;
    for r in 0..rows {
        if !loss_mask[r] {
            continue;
        }
        let row = &xd[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let mut denom = 0.0f64;
        for j in 0..vocab {
            let e = (row[j].to_f64() - max).exp();
            probs[r * vocab + j] = e;
            denom += e;
        }
        for j in 0..vocab {
            probs[r * vocab + j] /= denom;
        }
        let lse = denom.ln() + max;
        total += lse - row[targets[r] as usize].to_f64();
    }
    let loss = total / count as f64;
    let out = tape.output(vec![1], vec![E::from_f64(loss)], logits.requires_grad());
    if out.requires_grad() {
        let (lid, oid) = (logits.id(), out.id());
        let targets = targets.to_vec();
        let mask = loss_mask.to_vec();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let s = go[0].to_f64() / count as f64;
                let mut gl = vec![E::zero(); rows * vocab];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..vocab {
                        let indicator = if j == targets[r] as usize { 1.0 } else { 0.0 };
                        gl[r * vocab + j] = E::from_f64((probs[r * vocab + j] - indicator) * s);
                    }
                }
                g.accumulate(lid, gl);
            }
        }));
    }
    Ok(out)
}

/// Mean binary cross entropy with logits over masked positions;
/// `labels[i] == true` is the positive class. Empty mask yields 0.
pub fn bce_with_logits<E: Elem>(
    tape: &Tape<E>,
    logits: &Tensor<E>,
    labels: &[bool],
    loss_mask: &[bool],
) -> Result<Tensor<E>> {
    let rows = logits.len();
    if labels.len() != rows || loss_mask.len() != rows {
        return Err(Error::Contract(format!(
            "binary cross entropy alignment: {rows} logits, {} labels, {} mask entries",
            labels.len(),
            loss_mask.len()
        )));
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(tape.output(vec![1], vec![E::zero()], false));
    }
    let xd = logits.data();
    let mut total = 0.0f64;
    for r in 0..rows {
        if !loss_mask[r] {
            continue;
        }
        let z = xd[r].to_f64();
        let y = if labels[r] { 1.0 } else { 0.0 };
        // max(z,0) - z*y + ln(1 + exp(-|z|))
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    let loss = total / count as f64;
    let out = tape.output(vec![1], vec![E::from_f64(loss)], logits.requires_grad());
    if out.requires_grad() {
        let (lid, oid) = (logits.id(), out.id());
        let labels = labels.to_vec();
        let mask = loss_mask.to_vec();
        let saved = logits.data_arc();
        tape.record(Box::new(move |g| {
            if let Some(go) = g.take(oid) {
                let s = go[0].to_f64() / count as f64;
                let mut gl = vec![E::zero(); rows];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let z = saved[r].to_f64();
                    let p = 1.0 / (1.0 + (-z).exp());
                    let y = if labels[r] { 1.0 } else { 0.0 };
                    gl[r] = E::from_f64((p - y) * s);
                }
                g.accumulate(lid, gl);
            }
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over `[batch*heads, seq, head_dim]` inputs.
/// Each tensor in `additive` is tiled onto the score matrix; padding and
/// causal masks enter as large-negative additive constants.
pub fn scaled_dot_attention<E: Elem>(
    tape: &Tape<E>,
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    additive: &[&Tensor<E>],
) -> Result<Tensor<E>> {
    let head_dim = *q
        .shape()
        .last()
        .ok_or_else(|| Error::Contract("attention on rank-0 query".into()))?;
    let kt = transpose_last2(tape, k)?;
    let raw = bmm(tape, q, &kt)?;
    let mut scores = scale(tape, &raw, 1.0 / (head_dim as f64).sqrt());
    for extra in additive {
        scores = add_tiled(tape, &scores, extra)?;
    }
    let weights = softmax_last(tape, &scores);
    bmm(tape, &weights, v)
}

/// Large negative constant used for masked attention logits. Finite so no
/// NaN can appear when an entire row is masked.
pub fn neg_inf_mask_value() -> f64 {
    -1.0e9
}

pub fn mask_constant<E: Elem>(shape: Vec<usize>, blocked: &[bool]) -> Tensor<E> {
    let data = blocked
        .iter()
        .map(|&b| if b { ef::<E>(neg_inf_mask_value()) } else { E::zero() })
        .collect();
    Tensor::from_vec(shape, data).expect("mask shape matches flags")
}
