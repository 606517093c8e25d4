//! Tensor operations with hand-derived backward passes.
//!
//! Elementwise ops support suffix broadcasting (the smaller operand's shape
//! must be a suffix of the larger one's, e.g. bias `[d]` against `[b, l, d]`).
//! Matrix products accept 2-D operands, a stack of matrices against a shared
//! 2-D right-hand side, or two equally batched stacks.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{make_output, strides, Element, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// How two shapes line up for an elementwise op.
enum Broadcast {
    Equal,
    /// rhs repeats over the leading blocks of lhs
    RhsSuffix,
    /// lhs repeats over the leading blocks of rhs
    LhsSuffix,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        return Ok((Broadcast::Equal, a.to_vec()));
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok((Broadcast::RhsSuffix, a.to_vec()));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((Broadcast::LhsSuffix, b.to_vec()));
    }
    Err(shape_err(op, a, b))
}

fn elementwise<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    fwd: impl Fn(F, F) -> F,
    // d(out)/d(a), d(out)/d(b) as functions of the operand values
    da: impl Fn(F, F) -> F + 'static,
    db: impl Fn(F, F) -> F + 'static,
) -> Result<Tensor<F>> {
    let (cast, out_shape) = broadcast(op, a.shape(), b.shape())?;
    let av = a.data();
    let bv = b.data();
    let data: Vec<F> = match cast {
        Broadcast::Equal => av.iter().zip(bv.iter()).map(|(&x, &y)| fwd(x, y)).collect(),
        Broadcast::RhsSuffix => av
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv.iter()).map(|(&x, &y)| fwd(x, y)))
            .collect(),
        Broadcast::LhsSuffix => bv
            .chunks(av.len())
            .flat_map(|chunk| av.iter().zip(chunk.iter()).map(|(&x, &y)| fwd(x, y)))
            .collect(),
    };
    drop(av);
    drop(bv);

    let (ac, bc) = (a.clone(), b.clone());
    Ok(make_output(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let av = ac.data();
            let bv = bc.data();
            match (av.len() == g.len(), bv.len() == g.len()) {
                (true, true) => {
                    ac.grad_write(|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * da(av[i], bv[i]);
                        }
                    });
                    bc.grad_write(|gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * db(av[i], bv[i]);
                        }
                    });
                }
                (true, false) => {
                    let n = bv.len();
                    ac.grad_write(|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * da(av[i], bv[i % n]);
                        }
                    });
                    bc.grad_write(|gb| {
                        for i in 0..g.len() {
                            gb[i % n] += g[i] * db(av[i], bv[i % n]);
                        }
                    });
                }
                (false, true) => {
                    let n = av.len();
                    ac.grad_write(|ga| {
                        for i in 0..g.len() {
                            ga[i % n] += g[i] * da(av[i % n], bv[i]);
                        }
                    });
                    bc.grad_write(|gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * db(av[i % n], bv[i]);
                        }
                    });
                }
                (false, false) => unreachable!("one operand always matches the output"),
            }
        },
    ))
}

pub fn add<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    elementwise("add", a, b, |x, y| x + y, |_, _| F::one(), |_, _| F::one())
}

pub fn sub<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    elementwise(
        "sub",
        a,
        b,
        |x, y| x - y,
        |_, _| F::one(),
        |_, _| -F::one(),
    )
}

pub fn mul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    elementwise("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn scale<F: Element>(a: &Tensor<F>, c: f64) -> Tensor<F> {
    let k = F::from_f64(c);
    let data = a.data().iter().map(|&x| x * k).collect();
    let ac = a.clone();
    make_output(a.shape().to_vec(), data, vec![a.clone()], move |g| {
        ac.grad_write(|ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * k;
            }
        });
    })
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `out += alpha * lhs(.t()?) @ rhs(.t()?)`, accumulating into `out`.
fn gemm_acc<F: Element>(
    alpha: F,
    lhs: &[F],
    lhs_dims: (usize, usize),
    trans_lhs: bool,
    rhs: &[F],
    rhs_dims: (usize, usize),
    trans_rhs: bool,
    out: &mut [F],
    out_dims: (usize, usize),
) {
    let a = ArrayView2::from_shape(lhs_dims, lhs).expect("gemm lhs shape");
    let b = ArrayView2::from_shape(rhs_dims, rhs).expect("gemm rhs shape");
    let a = if trans_lhs { a.reversed_axes() } else { a };
    let b = if trans_rhs { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape(out_dims, out).expect("gemm out shape");
    general_mat_mul(alpha, &a, &b, F::one(), &mut c);
}

enum MmLayout {
    /// lhs flattened to [rows, k], rhs shared [*, *]
    SharedRhs { rows: usize },
    /// both stacked: `batch` matrices of [m, k] and [k-or-n, *]
    Batched { batch: usize },
}

fn mm_layout(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    transpose_b: bool,
) -> Result<(MmLayout, usize, usize, usize, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err(op, a, b));
    }
    let (bk, n) = {
        let (r, c) = (b[b.len() - 2], b[b.len() - 1]);
        if transpose_b {
            (c, r)
        } else {
            (r, c)
        }
    };
    let k = a[a.len() - 1];
    let m = a[a.len() - 2];
    if k != bk {
        return Err(shape_err(op, a, b));
    }
    if b.len() == 2 {
        let rows: usize = a[..a.len() - 1].iter().product();
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        Ok((MmLayout::SharedRhs { rows }, m, k, n, out_shape))
    } else {
        if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(shape_err(op, a, b));
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let mut out_shape = a[..a.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok((MmLayout::Batched { batch }, m, k, n, out_shape))
    }
}

fn matmul_impl<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    transpose_b: bool,
) -> Result<Tensor<F>> {
    let (layout, m, k, n, out_shape) = mm_layout(op, a.shape(), b.shape(), transpose_b)?;
    let numel: usize = out_shape.iter().product();
    let mut data = vec![F::zero(); numel];
    {
        let av = a.data();
        let bv = b.data();
        match layout {
            MmLayout::SharedRhs { rows } => {
                let bd = if transpose_b { (n, k) } else { (k, n) };
                gemm_acc(
                    F::one(),
                    &av,
                    (rows, k),
                    false,
                    &bv,
                    bd,
                    transpose_b,
                    &mut data,
                    (rows, n),
                );
            }
            MmLayout::Batched { batch } => {
                let bd = if transpose_b { (n, k) } else { (k, n) };
                for i in 0..batch {
                    gemm_acc(
                        F::one(),
                        &av[i * m * k..(i + 1) * m * k],
                        (m, k),
                        false,
                        &bv[i * bd.0 * bd.1..(i + 1) * bd.0 * bd.1],
                        bd,
                        transpose_b,
                        &mut data[i * m * n..(i + 1) * m * n],
                        (m, n),
                    );
                }
            }
        }
    }

    let (ac, bc) = (a.clone(), b.clone());
    Ok(make_output(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let av = ac.data();
            let bv = bc.data();
            match layout {
                MmLayout::SharedRhs { rows } => {
                    let bd = if transpose_b { (n, k) } else { (k, n) };
                    // dA = g @ B^T   (or g @ B when B is used transposed)
                    ac.grad_write(|ga| {
                        gemm_acc(
                            F::one(),
                            g,
                            (rows, n),
                            false,
                            &bv,
                            bd,
                            !transpose_b,
                            ga,
                            (rows, k),
                        );
                    });
                    // dB = A^T @ g, transposed into place when needed
                    bc.grad_write(|gb| {
                        if transpose_b {
                            gemm_acc(F::one(), g, (rows, n), true, &av, (rows, k), false, gb, bd);
                        } else {
                            gemm_acc(F::one(), &av, (rows, k), true, g, (rows, n), false, gb, bd);
                        }
                    });
                }
                MmLayout::Batched { batch } => {
                    let bd = if transpose_b { (n, k) } else { (k, n) };
                    ac.grad_write(|ga| {
                        for i in 0..batch {
                            gemm_acc(
                                F::one(),
                                &g[i * m * n..(i + 1) * m * n],
                                (m, n),
                                false,
                                &bv[i * bd.0 * bd.1..(i + 1) * bd.0 * bd.1],
                                bd,
                                !transpose_b,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                (m, k),
                            );
                        }
                    });
                    bc.grad_write(|gb| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * bd.0 * bd.1..(i + 1) * bd.0 * bd.1];
                            if transpose_b {
                                gemm_acc(F::one(), gi, (m, n), true, ai, (m, k), false, out, bd);
                            } else {
                                gemm_acc(F::one(), ai, (m, k), true, gi, (m, n), false, out, bd);
                            }
                        }
                    });
                }
            }
        },
    ))
}

/// `a @ b`. Leading batch dimensions must match, or `b` may be a plain matrix
/// shared across the batch.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    matmul_impl("matmul", a, b, false)
}

/// `a @ b.T` over the trailing two dimensions. The natural product for
/// `[out, in]` weight layouts.
pub fn matmul_tb<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    matmul_impl("matmul_tb", a, b, true)
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape<F: Element>(a: &Tensor<F>, new_shape: &[usize]) -> Result<Tensor<F>> {
    if new_shape.iter().product::<usize>() != a.numel() {
        return Err(shape_err("reshape", a.shape(), new_shape));
    }
    let data = a.data().clone();
    let ac = a.clone();
    Ok(make_output(
        new_shape.to_vec(),
        data,
        vec![a.clone()],
        move |g| {
            ac.accumulate_grad(g);
        },
    ))
}

fn permuted_copy<F: Element>(src: &[F], shape: &[usize], axes: &[usize], dst: &mut [F]) {
    if dst.is_empty() {
        return;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides(shape);
    // Input stride per output axis; the output is walked in linear order with
    // an incrementing multi-index, so no per-element division is needed.
    let walk_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let nd = shape.len();

    // Contiguous innermost runs can be block-copied.
    let contiguous_inner = walk_strides[nd - 1] == 1;
    let inner = out_shape[nd - 1];

    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let mut pos = 0usize;
    let total = dst.len();
    while pos < total {
        if contiguous_inner {
            dst[pos..pos + inner].copy_from_slice(&src[offset..offset + inner]);
            pos += inner;
        } else {
            let mut o = offset;
            for slot in &mut dst[pos..pos + inner] {
                *slot = src[o];
                o += walk_strides[nd - 1];
            }
            pos += inner;
        }
        // Carry into the outer axes.
        let mut d = nd - 1;
        loop {
            if d == 0 {
                // Finished the outermost axis; `pos == total` holds.
                break;
            }
            d -= 1;
            idx[d] += 1;
            offset += walk_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            offset -= walk_strides[d] * out_shape[d];
        }
    }
}

/// Reorder axes; `axes` must be a permutation of `0..ndim`.
pub fn permute<F: Element>(a: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let nd = a.shape().len();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true))
    {
        return Err(Error::InvalidAxis {
            op: "permute",
            axis: axes.iter().copied().find(|&ax| ax >= nd).unwrap_or(nd),
            shape: a.shape().to_vec(),
        });
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let mut data = vec![F::zero(); a.numel()];
    permuted_copy(&a.data(), a.shape(), axes, &mut data);

    let mut inverse = vec![0usize; nd];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    let ac = a.clone();
    let out_shape_back = out_shape.clone();
    Ok(make_output(out_shape, data, vec![a.clone()], move |g| {
        ac.grad_write(|ga| {
            let mut tmp = vec![F::zero(); g.len()];
            permuted_copy(g, &out_shape_back, &inverse, &mut tmp);
            for (gi, ti) in ga.iter_mut().zip(&tmp) {
                *gi += *ti;
            }
        });
    }))
}

/// Swap the trailing two dimensions.
pub fn transpose2<F: Element>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let nd = a.shape().len();
    if nd < 2 {
        return Err(Error::InvalidAxis {
            op: "transpose",
            axis: 1,
            shape: a.shape().to_vec(),
        });
    }
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 2, nd - 1);
    permute(a, &axes)
}

/// Split a shape at `axis` into (outer blocks, axis length, inner run).
fn block_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<F: Element>(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts.first().ok_or(Error::InvalidAxis {
        op: "concat",
        axis,
        shape: vec![],
    })?;
    let nd = first.shape().len();
    if axis >= nd {
        return Err(Error::InvalidAxis {
            op: "concat",
            axis,
            shape: first.shape().to_vec(),
        });
    }
    for p in parts {
        if p.shape().len() != nd
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
    }
    let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = block_dims(&out_shape, axis);

    let mut data = vec![F::zero(); out_shape.iter().product()];
    let mut offset = 0;
    for p in parts {
        let len = p.shape()[axis];
        let pv = p.data();
        for o in 0..outer {
            let src = &pv[o * len * inner..(o + 1) * len * inner];
            let dst_start = (o * axis_total + offset) * inner;
            data[dst_start..dst_start + len * inner].copy_from_slice(src);
        }
        offset += len;
    }

    let inputs: Vec<Tensor<F>> = parts.to_vec();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let handles = inputs.clone();
    Ok(make_output(out_shape, data, inputs, move |g| {
        let mut offset = 0;
        for (p, &len) in handles.iter().zip(&sizes) {
            p.grad_write(|gp| {
                for o in 0..outer {
                    let src_start = (o * axis_total + offset) * inner;
                    let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in dst.iter_mut().zip(&g[src_start..src_start + len * inner]) {
                        *d += *s;
                    }
                }
            });
            offset += len;
        }
    }))
}

pub fn slice<F: Element>(
    a: &Tensor<F>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<F>> {
    let nd = a.shape().len();
    if axis >= nd {
        return Err(Error::InvalidAxis {
            op: "slice",
            axis,
            shape: a.shape().to_vec(),
        });
    }
    let axis_len = a.shape()[axis];
    if start + len > axis_len {
        return Err(shape_err("slice", a.shape(), &[start, len]));
    }
    let (outer, _, inner) = block_dims(a.shape(), axis);
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = len;

    let av = a.data();
    let mut data = vec![F::zero(); outer * len * inner];
    for o in 0..outer {
        let src_start = (o * axis_len + start) * inner;
        data[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&av[src_start..src_start + len * inner]);
    }
    drop(av);

    let ac = a.clone();
    Ok(make_output(out_shape, data, vec![a.clone()], move |g| {
        ac.grad_write(|ga| {
            for o in 0..outer {
                let dst_start = (o * axis_len + start) * inner;
                for i in 0..len * inner {
                    ga[dst_start + i] += g[o * len * inner + i];
                }
            }
        });
    }))
}

/// Tile a tensor along a fresh leading axis of size `n`.
pub fn expand_leading<F: Element>(a: &Tensor<F>, n: usize) -> Result<Tensor<F>> {
    let chunk = a.numel();
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(a.shape());
    let av = a.data();
    let mut data = Vec::with_capacity(n * chunk);
    for _ in 0..n {
        data.extend_from_slice(&av);
    }
    drop(av);
    let ac = a.clone();
    Ok(make_output(out_shape, data, vec![a.clone()], move |g| {
        ac.grad_write(|ga| {
            for rep in g.chunks(chunk) {
                for (gi, ri) in ga.iter_mut().zip(rep) {
                    *gi += *ri;
                }
            }
        });
    }))
}

// ---------------------------------------------------------------------------
// Reductions and gathers
// ---------------------------------------------------------------------------

pub fn sum_all<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    let s: F = a.data().iter().copied().sum();
    let ac = a.clone();
    make_output(vec![], vec![s], vec![a.clone()], move |g| {
        let go = g[0];
        ac.grad_write(|ga| {
            for gi in ga.iter_mut() {
                *gi += go;
            }
        });
    })
}

pub fn mean_all<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    let n = F::from_f64(a.numel() as f64);
    let s: F = a.data().iter().copied().sum();
    let ac = a.clone();
    make_output(vec![], vec![s / n], vec![a.clone()], move |g| {
        let go = g[0] / n;
        ac.grad_write(|ga| {
            for gi in ga.iter_mut() {
                *gi += go;
            }
        });
    })
}

/// Row lookup into an embedding table `[vocab, d]`; adjoints scatter-add back
/// into the table rows.
pub fn embedding<F: Element>(table: &Tensor<F>, ids: &[u32]) -> Result<Tensor<F>> {
    if table.shape().len() != 2 {
        return Err(shape_err("embedding", table.shape(), &[ids.len()]));
    }
    let vocab = table.shape()[0];
    let d = table.shape()[1];
    for (position, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::IdOutOfRange {
                id,
                vocab,
                position,
            });
        }
    }
    let tv = table.data();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let row = id as usize;
        data.extend_from_slice(&tv[row * d..(row + 1) * d]);
    }
    drop(tv);

    let tc = table.clone();
    let ids_owned: Vec<u32> = ids.to_vec();
    Ok(make_output(
        vec![ids.len(), d],
        data,
        vec![table.clone()],
        move |g| {
            tc.grad_write(|gt| {
                for (i, &id) in ids_owned.iter().enumerate() {
                    let row = id as usize;
                    for j in 0..d {
                        gt[row * d + j] += g[i * d + j];
                    }
                }
            });
        },
    ))
}

/// Select one sub-row per leading index: `x[b, idx[b], ...] -> out[b, ...]`.
pub fn gather_rows<F: Element>(x: &Tensor<F>, idx: &[usize]) -> Result<Tensor<F>> {
    if x.shape().len() < 2 || idx.len() != x.shape()[0] {
        return Err(shape_err("gather_rows", x.shape(), &[idx.len()]));
    }
    let rows = x.shape()[0];
    let seq = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    for &i in idx {
        if i >= seq {
            return Err(Error::InvalidAxis {
                op: "gather_rows",
                axis: i,
                shape: x.shape().to_vec(),
            });
        }
    }
    let xv = x.data();
    let mut data = Vec::with_capacity(rows * inner);
    for (b, &i) in idx.iter().enumerate() {
        let start = (b * seq + i) * inner;
        data.extend_from_slice(&xv[start..start + inner]);
    }
    drop(xv);

    let mut out_shape = vec![rows];
    out_shape.extend_from_slice(&x.shape()[2..]);
    let xc = x.clone();
    let idx_owned: Vec<usize> = idx.to_vec();
    Ok(make_output(out_shape, data, vec![x.clone()], move |g| {
        xc.grad_write(|gx| {
            for (b, &i) in idx_owned.iter().enumerate() {
                let start = (b * seq + i) * inner;
                for j in 0..inner {
                    gx[start + j] += g[b * inner + j];
                }
            }
        });
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::leaf(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let identity = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = matmul(&a, &identity).unwrap();
        assert_eq!(*out.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let z = Tensor::<f64>::zeros(&[3]);
        let out = add(&x, &z).unwrap();
        assert_eq!(*out.data(), *x.data());
    }

    #[test]
    fn matmul_row_times_column() {
        // [[1, 2]] @ [[3], [4]] = [[11]]
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(*out.data(), vec![11.0]);

        // Backward of the scalar product: dA = b^T, dB = a^T.
        backward(&out).unwrap();
        assert_eq!(a.grad().as_ref().unwrap().as_slice(), &[3.0, 4.0]);
        assert_eq!(b.grad().as_ref().unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![1, 3]);
                assert_eq!(rhs, vec![2, 1]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_tb_matches_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[4, 3], &(0..12).map(f64::from).collect::<Vec<_>>());
        let direct = matmul_tb(&a, &w).unwrap();
        let via_transpose = matmul(&a, &transpose2(&w).unwrap()).unwrap();
        assert_eq!(*direct.data(), *via_transpose.data());
    }

    #[test]
    fn batched_matmul_runs_per_slice() {
        // Two stacked 1x2 @ 2x1 products.
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 1], &[1.0, 1.0, 2.0, 0.5]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 1, 1]);
        assert_eq!(*out.data(), vec![3.0, 8.0]);
    }

    #[test]
    fn shared_rhs_accumulates_weight_grad_over_batch() {
        let x = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = matmul(&x, &w).unwrap();
        let loss = sum_all(&out);
        backward(&loss).unwrap();
        // Each weight entry is touched once per batch row that selects it.
        assert_eq!(w.grad().as_ref().unwrap().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn broadcast_bias_backward_sums_over_rows() {
        let x = t(&[2, 3], &[1.0; 6]);
        let b = t(&[3], &[0.5, 0.5, 0.5]);
        let out = add(&x, &b).unwrap();
        let loss = sum_all(&out);
        backward(&loss).unwrap();
        assert_eq!(b.grad().as_ref().unwrap().as_slice(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let joined = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(joined.shape(), &[2, 3]);
        assert_eq!(*joined.data(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let back = slice(&joined, 1, 2, 1).unwrap();
        assert_eq!(*back.data(), vec![9.0, 8.0]);
        let loss = sum_all(&back);
        backward(&loss).unwrap();
        assert_eq!(b.grad().as_ref().unwrap().as_slice(), &[1.0, 1.0]);
        assert!(a.grad().is_none() || a.grad().as_ref().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn permute_inverse_restores_layout() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = permute(&a, &[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(*p.data(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = permute(&p, &[1, 0]).unwrap();
        assert_eq!(*back.data(), *a.data());
    }

    #[test]
    fn embedding_gathers_rows_and_scatters_grads() {
        let table = t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let out = embedding(&table, &[2, 0]).unwrap();
        assert_eq!(*out.data(), vec![20.0, 21.0, 0.0, 1.0]);

        // ids [1, 1]: backward of sum puts grad 2 on row 1, zero elsewhere
        let dup = embedding(&table, &[1, 1]).unwrap();
        let loss = sum_all(&dup);
        backward(&loss).unwrap();
        assert_eq!(
            table.grad().as_ref().unwrap().as_slice(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn embedding_empty_ids_gives_empty_rows() {
        let table = t(&[3, 2], &[0.0; 6]);
        let out = embedding(&table, &[]).unwrap();
        assert_eq!(out.shape(), &[0, 2]);
        assert_eq!(out.numel(), 0);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let table = t(&[3, 2], &[0.0; 6]);
        match embedding(&table, &[1, 7]) {
            Err(Error::IdOutOfRange { id, vocab, position }) => {
                assert_eq!((id, vocab, position), (7, 3, 1));
            }
            other => panic!("expected IdOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn gather_rows_selects_per_batch_positions() {
        let x = t(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = gather_rows(&x, &[2, 0]).unwrap();
        assert_eq!(*out.data(), vec![3.0, 4.0]);
        let loss = sum_all(&out);
        backward(&loss).unwrap();
        assert_eq!(
            x.grad().as_ref().unwrap().as_slice(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn expand_leading_sums_grads_over_copies() {
        let a = t(&[2], &[1.0, 2.0]);
        let e = expand_leading(&a, 3).unwrap();
        assert_eq!(e.shape(), &[3, 2]);
        let loss = sum_all(&e);
        backward(&loss).unwrap();
        assert_eq!(a.grad().as_ref().unwrap().as_slice(), &[3.0, 3.0]);
    }
}
