//! Row gather / scatter between grids, point sets and pair lists.
//!
//! Both ops view their inputs as `[rows, d]` where `d` is the last extent.

use super::Tensor;
use crate::error::{bail, Result};

fn rows_of(x: &Tensor) -> Result<(usize, usize)> {
    let Some(&d) = x.shape().last() else {
        bail!(Argument, "row ops need rank >= 1");
    };
    Ok((x.numel() / d, d))
}

/// `out[k] = x[idx[k]]`, shape `[idx.len(), d]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (rows, d) = rows_of(x)?;
    if idx.is_empty() {
        bail!(Argument, "gather_rows with an empty index list");
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        bail!(Argument, "gather_rows: index {bad} out of range for {rows} rows");
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    let idx = idx.to_vec();
    let n = x.numel();
    Ok(Tensor::from_op(vec![idx.len(), d], out, vec![x.clone()], move |_, _, g| {
        let mut gx = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            gx[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
        }
        vec![Some(gx)]
    }))
}

/// Rows of `base` that receive at least one entry of `values` (via `idx`)
/// are replaced by the mean of those entries; all other rows pass through.
/// The result has `base`'s shape.
pub fn scatter_mean_replace(base: &Tensor, idx: &[usize], values: &Tensor) -> Result<Tensor> {
    let (rows, d) = rows_of(base)?;
    let (vrows, vd) = rows_of(values)?;
    if vd != d || vrows != idx.len() {
        bail!(
            Argument,
            "scatter_mean_replace: {} indices / values {:?} vs base row width {d}",
            idx.len(),
            values.shape()
        );
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        bail!(Argument, "scatter_mean_replace: index {bad} out of range for {rows} rows");
    }
    let mut count = vec![0u32; rows];
    for &i in idx {
        count[i] += 1;
    }
    let mut out = base.data().to_vec();
    for (i, &c) in count.iter().enumerate() {
        if c > 0 {
            out[i * d..(i + 1) * d].fill(0.0);
        }
    }
    let vdata = values.data();
    for (k, &i) in idx.iter().enumerate() {
        out[i * d..(i + 1) * d].iter_mut().zip(&vdata[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
    }
    for (i, &c) in count.iter().enumerate() {
        if c > 1 {
            let inv = c as f64;
            out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= inv);
        }
    }
    let idx = idx.to_vec();
    Ok(Tensor::from_op(base.shape().to_vec(), out, vec![base.clone(), values.clone()], move |p, _, g| {
        let gb = p[0].requires_grad().then(|| {
            let mut gb = g.to_vec();
            for (i, &c) in count.iter().enumerate() {
                if c > 0 {
                    gb[i * d..(i + 1) * d].fill(0.0);
                }
            }
            gb
        });
        let gv = p[1].requires_grad().then(|| {
            let mut gv = vec![0.0; idx.len() * d];
            for (k, &i) in idx.iter().enumerate() {
                let inv = count[i] as f64;
                gv[k * d..(k + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a = b / inv);
            }
            gv
        });
        vec![gb, gv]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_then_backward_accumulates_duplicates() {
        let x = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = gather_rows(&x, &[2, 0, 2]).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        crate::tensor::sum(&y).backward().unwrap();
        assert_eq!(&*x.grad().unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn scatter_mean_replaces_only_touched_rows() {
        let base = Tensor::new(&[3, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let vals = Tensor::new(&[3, 1], vec![1.0, 2.0, 4.0]).unwrap();
        let y = scatter_mean_replace(&base, &[0, 2, 2], &vals).unwrap();
        assert_eq!(y.data(), &[1.0, 20.0, 3.0]);
    }

    #[test]
    fn gather_rejects_bad_index() {
        let x = Tensor::new(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(gather_rows(&x, &[2]).is_err());
    }
}
