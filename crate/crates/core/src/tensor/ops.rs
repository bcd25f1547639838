//! Elementwise, linear-algebra, reduction and loss operations.
//!
//! Every op validates shapes up front and returns an argument error on
//! mismatch. None of the ops produce NaN/Inf on finite inputs whose
//! magnitude stays below ~1e150 (products and sums of squares are the
//! limiting cases); softmax and cross-entropy are safe for any finite input
//! because they subtract the row maximum before exponentiating.

use super::{numel, Tensor};
use crate::error::{bail, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Argument, "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

fn grad_if(t: &Tensor, f: impl FnOnce() -> Vec<f64>) -> Option<Vec<f64>> {
    t.requires_grad().then(f)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], |p, _, g| {
        vec![grad_if(&p[0], || g.to_vec()), grad_if(&p[1], || g.to_vec())]
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], |p, _, g| {
        vec![
            grad_if(&p[0], || g.to_vec()),
            grad_if(&p[1], || g.iter().map(|v| -v).collect()),
        ]
    }))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], |p, _, g| {
        vec![
            grad_if(&p[0], || g.iter().zip(p[1].data()).map(|(g, y)| g * y).collect()),
            grad_if(&p[1], || g.iter().zip(p[0].data()).map(|(g, x)| g * x).collect()),
        ]
    }))
}

/// Multiply by a constant.
pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    Tensor::from_op(a.shape().to_vec(), data, vec![a.clone()], move |_, _, g| {
        vec![Some(g.iter().map(|v| v * s).collect())]
    })
}

/// `x + bias` with `bias` broadcast along the last axis of `x`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&1);
    if bias.shape() != [c] {
        bail!(Argument, "add_bias: bias shape {:?} does not match last axis {c}", bias.shape());
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
        .collect();
    Ok(Tensor::from_op(x.shape().to_vec(), data, vec![x.clone(), bias.clone()], move |p, _, g| {
        vec![
            grad_if(&p[0], || g.to_vec()),
            grad_if(&p[1], || {
                let mut gb = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            }),
        ]
    }))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], |_, out, g| {
        vec![Some(out.iter().zip(g).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect())]
    })
}

/// View with a new shape of equal element count.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.numel() || shape.iter().any(|&d| d == 0) {
        bail!(Argument, "reshape: cannot view {:?} as {shape:?}", x.shape());
    }
    Ok(Tensor::from_op(shape.to_vec(), x.data().to_vec(), vec![x.clone()], |_, _, g| {
        vec![Some(g.to_vec())]
    }))
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
}

// c[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            c[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// c[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            c[kk * n..(kk + 1) * n].iter_mut().zip(grow).for_each(|(c, g)| *c += av * g);
        }
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        bail!(Argument, "matmul expects rank-2 operands, got {:?} and {:?}", a.shape(), b.shape());
    };
    if k != k2 {
        bail!(Argument, "matmul: inner dims differ ({k} vs {k2})");
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |p, _, g| {
        vec![
            grad_if(&p[0], || {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g, p[1].data(), &mut ga, m, k, n);
                ga
            }),
            grad_if(&p[1], || {
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(p[0].data(), g, &mut gb, m, k, n);
                gb
            }),
        ]
    }))
}

/// Batched matmul `[b,m,k] x [b,k,n] -> [b,m,n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[bs, m, k], &[bs2, k2, n]) = (a.shape(), b.shape()) else {
        bail!(Argument, "bmm expects rank-3 operands, got {:?} and {:?}", a.shape(), b.shape());
    };
    if bs != bs2 || k != k2 {
        bail!(Argument, "bmm: incompatible shapes {:?} and {:?}", a.shape(), b.shape());
    }
    let mut out = vec![0.0; bs * m * n];
    for i in 0..bs {
        gemm_acc(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor::from_op(vec![bs, m, n], out, vec![a.clone(), b.clone()], move |p, _, g| {
        vec![
            grad_if(&p[0], || {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm_nt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &p[1].data()[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                ga
            }),
            grad_if(&p[1], || {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm_tn_acc(
                        &p[0].data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            }),
        ]
    }))
}

/// (outer, len, inner) strides of `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        bail!(Argument, "{op}: axis {axis} out of range for rank {}", x.rank());
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |_, y, g| {
        let mut gx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                for j in 0..len {
                    gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Sum over `axis`, removing it from the shape.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", x, axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += src[o * len * inner + j * inner + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |_, _, g| {
        let mut gx = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    gx[o * len * inner + j * inner + i] = g[o * inner + i];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Sum of all elements as a scalar.
pub fn sum(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(vec![], vec![s], vec![x.clone()], move |_, _, g| vec![Some(vec![g[0]; n])])
}

/// Mean of all elements as a scalar.
pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s = x.data().iter().sum::<f64>() / n as f64;
    Tensor::from_op(vec![], vec![s], vec![x.clone()], move |_, _, g| {
        vec![Some(vec![g[0] / n as f64; n])]
    })
}

/// Squared L2 norm along the last axis: `[.., c] -> [..]`.
pub fn sq_norm_last(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        bail!(Argument, "sq_norm_last needs rank >= 1");
    }
    let c = *x.shape().last().unwrap();
    let out: Vec<f64> = x.data().chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let shape = x.shape()[..x.rank() - 1].to_vec();
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |p, _, g| {
        let gx = p[0]
            .data()
            .chunks_exact(c)
            .zip(g)
            .flat_map(|(row, &g)| row.iter().map(move |v| 2.0 * v * g))
            .collect();
        vec![Some(gx)]
    }))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        bail!(Argument, "concat of zero tensors");
    };
    check_axis("concat", first, axis)?;
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            bail!(Argument, "concat: shape {:?} incompatible with {:?} on axis {axis}", x.shape(), first.shape());
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (x, &w) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    Ok(Tensor::from_op(shape, out, xs.to_vec(), move |p, _, g| {
        let mut grads: Vec<Option<Vec<f64>>> =
            p.iter().zip(&widths).map(|(t, &w)| t.requires_grad().then(|| Vec::with_capacity(outer * w))).collect();
        for o in 0..outer {
            let mut off = o * total;
            for (gr, &w) in grads.iter_mut().zip(&widths) {
                if let Some(gr) = gr {
                    gr.extend_from_slice(&g[off..off + w]);
                }
                off += w;
            }
        }
        grads
    }))
}

/// Mean cross-entropy of `logits [n, c]` against class indices.
///
/// Entries equal to `ignore` are skipped; if every entry is ignored the
/// loss is exactly zero (and so is its gradient).
pub fn cross_entropy(logits: &Tensor, labels: &[usize], ignore: usize) -> Result<Tensor> {
    let &[n, c] = logits.shape() else {
        bail!(Argument, "cross_entropy expects [n, c] logits, got {:?}", logits.shape());
    };
    if labels.len() != n {
        bail!(Argument, "cross_entropy: {} labels for {n} rows", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c && l != ignore) {
        bail!(Argument, "cross_entropy: label {bad} outside [0, {c}) and not the ignore label {ignore}");
    }
    let counted = labels.iter().filter(|&&l| l != ignore).count();
    // Softmax rows are kept for the backward pass.
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        total += log_z - row[l];
        for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
    }
    let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
    let labels = labels.to_vec();
    Ok(Tensor::from_op(vec![], vec![loss], vec![logits.clone()], move |_, _, g| {
        let mut gx = vec![0.0; n * c];
        if counted > 0 {
            let s = g[0] / counted as f64;
            for (i, &l) in labels.iter().enumerate() {
                if l == ignore {
                    continue;
                }
                for j in 0..c {
                    gx[i * c + j] = s * (probs[i * c + j] - if j == l { 1.0 } else { 0.0 });
                }
            }
        }
        vec![Some(gx)]
    }))
}
