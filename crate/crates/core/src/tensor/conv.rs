//! Dense grid convolutions and nearest-neighbour upsampling, channels-last.
//!
//! 2D maps are `[h, w, c]`, 3D voxel grids are `[d, h, w, c]`. Kernels are
//! odd-sized with "same" zero padding (`k / 2`), so a stride-`s` convolution
//! produces `ceil(n / s)` cells per axis. There is no bias: an all-zero
//! neighbourhood yields an all-zero output, which keeps empty space in a
//! voxel grid at zero through every layer.
//!
//! The kernels skip zero input activations and zero output gradients. This
//! does not change any result (the skipped terms are exactly zero) but makes
//! the mostly-empty voxel grids cheap.

use super::Tensor;
use crate::error::{bail, Result};

#[derive(Clone, Copy)]
struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: usize,
    cin: usize,
    cout: usize,
}

impl Geometry {
    fn new(input: [usize; 3], kernel: [usize; 3], stride: usize, cin: usize, cout: usize) -> Self {
        let output = [0, 1, 2].map(|a| input[a].div_ceil(stride));
        Geometry { input, output, kernel, stride, cin, cout }
    }

    /// Calls `f(out_cell, kernel_tap, in_cell)` for every in-bounds pairing,
    /// in row-major order of output cell then kernel tap.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [id_, ih, iw] = self.input;
        let pad = [kd / 2, kh / 2, kw / 2];
        let s = self.stride as isize;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let o = (z * oh + y) * ow + x;
                    let mut tap = 0;
                    for dz in 0..kd {
                        let iz = z as isize * s + dz as isize - pad[0] as isize;
                        for dy in 0..kh {
                            let iy = y as isize * s + dy as isize - pad[1] as isize;
                            for dx in 0..kw {
                                let ix = x as isize * s + dx as isize - pad[2] as isize;
                                if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < id_
                                    && (iy as usize) < ih
                                    && (ix as usize) < iw
                                {
                                    let i = (iz as usize * ih + iy as usize) * iw + ix as usize;
                                    f(o, tap, i);
                                }
                                tap += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_grid(x: &Tensor, w: &Tensor, g: Geometry, out_shape: Vec<usize>) -> Tensor {
    let (cin, cout) = (g.cin, g.cout);
    let ncell = g.output.iter().product::<usize>();
    let mut out = vec![0.0; ncell * cout];
    {
        let xd = x.data();
        let wd = w.data();
        g.for_each(|o, tap, i| {
            let xin = &xd[i * cin..(i + 1) * cin];
            let orow = &mut out[o * cout..(o + 1) * cout];
            let wk = &wd[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &a) in xin.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let wrow = &wk[ci * cout..(ci + 1) * cout];
                orow.iter_mut().zip(wrow).for_each(|(o, w)| *o += a * w);
            }
        });
    }
    Tensor::from_op(out_shape, out, vec![x.clone(), w.clone()], move |p, _, gout| {
        let (x, w) = (&p[0], &p[1]);
        let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![0.0; w.numel()]);
        let live: Vec<bool> = gout.chunks_exact(cout).map(|r| r.iter().any(|&v| v != 0.0)).collect();
        let (xd, wd) = (x.data(), w.data());
        g.for_each(|o, tap, i| {
            if !live[o] {
                return;
            }
            let grow = &gout[o * cout..(o + 1) * cout];
            if let Some(gx) = gx.as_mut() {
                let wk = &wd[tap * cin * cout..(tap + 1) * cin * cout];
                let gxr = &mut gx[i * cin..(i + 1) * cin];
                for (ci, gv) in gxr.iter_mut().enumerate() {
                    let wrow = &wk[ci * cout..(ci + 1) * cout];
                    *gv += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(gw) = gw.as_mut() {
                let xin = &xd[i * cin..(i + 1) * cin];
                let gwk = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &a) in xin.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    gwk[ci * cout..(ci + 1) * cout].iter_mut().zip(grow).for_each(|(g, v)| *g += a * v);
                }
            }
        });
        vec![gx, gw]
    })
}

fn check_kernel(kernel: &[usize], stride: usize) -> Result<()> {
    if kernel.iter().any(|k| k % 2 == 0) {
        bail!(Argument, "convolution kernels must be odd-sized, got {kernel:?}");
    }
    if stride == 0 {
        bail!(Argument, "convolution stride must be positive");
    }
    Ok(())
}

/// 2D convolution: `x [h, w, cin]`, `weight [kh, kw, cin, cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (&[h, w, cin], &[kh, kw, wcin, cout]) = (x.shape(), weight.shape()) else {
        bail!(Argument, "conv2d: expected [h,w,c] input and [kh,kw,cin,cout] weight, got {:?} / {:?}", x.shape(), weight.shape());
    };
    if cin != wcin {
        bail!(Argument, "conv2d: input has {cin} channels, weight expects {wcin}");
    }
    check_kernel(&[kh, kw], stride)?;
    let g = Geometry::new([1, h, w], [1, kh, kw], stride, cin, cout);
    let shape = vec![g.output[1], g.output[2], cout];
    Ok(conv_grid(x, weight, g, shape))
}

/// 3D convolution: `x [d, h, w, cin]`, `weight [kd, kh, kw, cin, cout]`.
pub fn conv3d(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (&[d, h, w, cin], &[kd, kh, kw, wcin, cout]) = (x.shape(), weight.shape()) else {
        bail!(Argument, "conv3d: expected [d,h,w,c] input and [kd,kh,kw,cin,cout] weight, got {:?} / {:?}", x.shape(), weight.shape());
    };
    if cin != wcin {
        bail!(Argument, "conv3d: input has {cin} channels, weight expects {wcin}");
    }
    check_kernel(&[kd, kh, kw], stride)?;
    let g = Geometry::new([d, h, w], [kd, kh, kw], stride, cin, cout);
    let shape = vec![g.output[0], g.output[1], g.output[2], cout];
    Ok(conv_grid(x, weight, g, shape))
}

/// Nearest-neighbour upsampling to `target` spatial extents, where each
/// target extent must satisfy `ceil(target / 2) == source`.
fn upsample(x: &Tensor, src: [usize; 3], target: [usize; 3], c: usize, shape: Vec<usize>) -> Result<Tensor> {
    for a in 0..3 {
        let ok = if src[a] == 1 && target[a] == 1 { true } else { target[a].div_ceil(2) == src[a] };
        if !ok {
            bail!(Argument, "upsample: cannot map extent {} to {}", src[a], target[a]);
        }
    }
    let scale = |a: usize, i: usize| if target[a] == 1 { 0 } else { i / 2 };
    let mut map = Vec::with_capacity(target.iter().product());
    for z in 0..target[0] {
        for y in 0..target[1] {
            for xx in 0..target[2] {
                map.push((scale(0, z) * src[1] + scale(1, y)) * src[2] + scale(2, xx));
            }
        }
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(map.len() * c);
    for &s in &map {
        out.extend_from_slice(&xd[s * c..(s + 1) * c]);
    }
    let n_src = x.numel();
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |_, _, g| {
        let mut gx = vec![0.0; n_src];
        for (o, &s) in map.iter().enumerate() {
            gx[s * c..(s + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]).for_each(|(a, b)| *a += b);
        }
        vec![Some(gx)]
    }))
}

/// `[h, w, c] -> [th, tw, c]` with `ceil(th/2) == h`, `ceil(tw/2) == w`.
pub fn upsample2d(x: &Tensor, target_hw: [usize; 2]) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        bail!(Argument, "upsample2d expects [h,w,c], got {:?}", x.shape());
    };
    let [th, tw] = target_hw;
    upsample(x, [1, h, w], [1, th, tw], c, vec![th, tw, c])
}

/// `[d, h, w, c] -> [td, th, tw, c]`, each target extent `ceil(t/2) == source`.
pub fn upsample3d(x: &Tensor, target_dhw: [usize; 3]) -> Result<Tensor> {
    let &[d, h, w, c] = x.shape() else {
        bail!(Argument, "upsample3d expects [d,h,w,c], got {:?}", x.shape());
    };
    let [td, th, tw] = target_dhw;
    upsample(x, [d, h, w], [td, th, tw], c, vec![td, th, tw, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward zero-padded convolution without any skipping.
    fn naive_conv2d(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], k: usize, cout: usize, s: usize) -> Vec<f64> {
        let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
        let p = (k / 2) as isize;
        let mut out = vec![0.0; oh * ow * cout];
        for y in 0..oh {
            for xx in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * s) as isize + ky as isize - p;
                            let ix = (xx * s) as isize + kx as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[((iy as usize) * w + ix as usize) * cin + ci]
                                    * wt[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(y * ow + xx) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let (h, w, cin, cout) = (5, 6, 2, 3);
        let x: Vec<f64> = (0..h * w * cin).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wt: Vec<f64> = (0..9 * cin * cout).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect();
        for s in [1, 2] {
            let y = conv2d(&Tensor::new(&[h, w, cin], x.clone()).unwrap(), &Tensor::new(&[3, 3, cin, cout], wt.clone()).unwrap(), s).unwrap();
            let r = naive_conv2d(&x, h, w, cin, &wt, 3, cout, s);
            assert_eq!(y.shape(), &[h.div_ceil(s), w.div_ceil(s), cout]);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv3d_empty_space_stays_zero() {
        let mut x = vec![0.0; 4 * 4 * 4];
        x[0] = 1.0;
        let x = Tensor::new(&[4, 4, 4, 1], x).unwrap();
        let w = Tensor::new(&[3, 3, 3, 1, 1], vec![1.0; 27]).unwrap();
        let y = conv3d(&x, &w, 1).unwrap();
        // only the 2x2x2 corner neighbourhood of cell 0 is reached
        assert_eq!(y.data().iter().filter(|&&v| v != 0.0).count(), 8);
    }

    #[test]
    fn upsample_odd_extent() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2d(&x, [3, 4]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        assert!(upsample2d(&x, [5, 4]).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::new(&[2, 2, 1], vec![0.0; 4]).unwrap();
        let w = Tensor::new(&[2, 2, 1, 1], vec![0.0; 4]).unwrap();
        assert!(conv2d(&x, &w, 1).is_err());
    }
}
