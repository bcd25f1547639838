//! Per-pair multi-head attention fusing paired 3D and 2D decoder features.
//!
//! For a pair `i` the "self" modality supplies keys and values, the other
//! modality supplies queries. Each head reduces `K ⊙ Q` to one score; the
//! scores are normalized over the head axis, mix the per-head values into a
//! `d / H` vector, which a linear map expands back to `d`. The result is
//! concatenated with the untouched self feature and projected to `d`.
//!
//! Projections are pointwise linear maps. Key, query, value and expansion
//! maps carry no bias, so zeroing the value weights removes the attention
//! path exactly; only the output map has a bias.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::tensor::{add_bias, bmm, concat, matmul, mul, reshape, softmax, sum_axis, ParamSet, Tensor};

/// Which side of the pair is being fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Voxel,
    Image,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::Voxel => "3d",
            Side::Image => "2d",
        }
    }
}

/// Shapes of the fusion blocks: one block per decoder scale and side.
#[derive(Clone, Debug, PartialEq)]
pub struct DmfConfig {
    pub heads: usize,
    /// 3D feature width at each fused scale.
    pub widths_3d: Vec<usize>,
    /// 2D feature width at each fused scale.
    pub widths_2d: Vec<usize>,
}

impl DmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            bail!(Config, "head count must be positive");
        }
        if self.widths_3d.len() != self.widths_2d.len() {
            bail!(Config, "fused scale counts differ: {} vs {}", self.widths_3d.len(), self.widths_2d.len());
        }
        for &d in self.widths_3d.iter().chain(&self.widths_2d) {
            if d == 0 || d % self.heads != 0 {
                bail!(Config, "{} heads do not divide feature width {d}", self.heads);
            }
        }
        Ok(())
    }

    /// Parameter names and shapes for `side` at `scale`.
    pub fn param_shapes(&self, scale: usize, side: Side) -> Vec<(String, Vec<usize>)> {
        let (d_self, d_other) = match side {
            Side::Voxel => (self.widths_3d[scale], self.widths_2d[scale]),
            Side::Image => (self.widths_2d[scale], self.widths_3d[scale]),
        };
        let n = |part: &str| param_name(scale, side, part);
        vec![
            (n("key"), vec![d_self, d_self]),
            (n("value"), vec![d_self, d_self]),
            (n("query"), vec![d_other, d_self]),
            (n("expand"), vec![d_self / self.heads, d_self]),
            (n("out.w"), vec![2 * d_self, d_self]),
            (n("out.b"), vec![d_self]),
        ]
    }

    /// Normal(0, 1/fan_in) weights, zero output bias.
    pub fn init<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) -> Result<()> {
        self.validate()?;
        for scale in 0..self.widths_3d.len() {
            for side in [Side::Voxel, Side::Image] {
                for (name, shape) in self.param_shapes(scale, side) {
                    let n: usize = shape.iter().product();
                    let data = if name.ends_with(".b") {
                        vec![0.0; n]
                    } else {
                        let dist = Normal::new(0.0, (1.0 / shape[0] as f64).sqrt())
                            .map_err(|e| crate::Error::Internal(e.to_string()))?;
                        (0..n).map(|_| dist.sample(rng)).collect()
                    };
                    params.insert(name, &shape, data)?;
                }
            }
        }
        Ok(())
    }
}

pub fn param_name(scale: usize, side: Side, part: &str) -> String {
    format!("dmf.s{scale}.{}.{part}", side.tag())
}

/// Per-pair head weights: `score[i, h] = Σ_c K[i, h, c] Q[i, h, c]`,
/// normalized by a softmax over `h`. Inputs are `N x H x dh`, output `N x H`.
pub fn attention_weights(keys: &Tensor, queries: &Tensor) -> Result<Tensor> {
    if keys.rank() != 3 || keys.shape() != queries.shape() {
        bail!(Contract, "attention needs matching N x H x dh inputs, got {:?} and {:?}", keys.shape(), queries.shape());
    }
    softmax(&sum_axis(&mul(keys, queries)?, 2)?, 1)
}

fn fuse(own: &Tensor, other: &Tensor, params: &ParamSet, heads: usize, scale: usize, side: Side) -> Result<Tensor> {
    if own.rank() != 2 || other.rank() != 2 {
        bail!(Contract, "fusion inputs must be N x d, got {:?} and {:?}", own.shape(), other.shape());
    }
    let (n, d) = (own.shape()[0], own.shape()[1]);
    if other.shape()[0] != n {
        bail!(Contract, "pair count mismatch: {n} vs {}", other.shape()[0]);
    }
    if heads == 0 || d % heads != 0 {
        bail!(Contract, "{heads} heads do not divide feature width {d}");
    }
    let dh = d / heads;
    let p = |part: &str| params.get(&param_name(scale, side, part));
    let keys = reshape(&matmul(own, p("key")?)?, &[n, heads, dh])?;
    let values = reshape(&matmul(own, p("value")?)?, &[n, heads, dh])?;
    let queries = reshape(&matmul(other, p("query")?).map_err(|e| contract(e, side))?, &[n, heads, dh])?;
    let attn = attention_weights(&keys, &queries)?;
    let mixed = reshape(&bmm(&reshape(&attn, &[n, 1, heads])?, &values)?, &[n, dh])?;
    let expanded = matmul(&mixed, p("expand")?)?;
    add_bias(&matmul(&concat(&[expanded, own.clone()], 1)?, p("out.w")?)?, p("out.b")?)
}

fn contract(e: crate::Error, side: Side) -> crate::Error {
    crate::Error::Contract(format!("query projection of the {} fusion: {e}", side.tag()))
}

/// Fused 3D features (`N x d1`) from paired 3D and 2D features.
pub fn fuse_3d(f3d: &Tensor, f2d: &Tensor, params: &ParamSet, heads: usize, scale: usize) -> Result<Tensor> {
    fuse(f3d, f2d, params, heads, scale, Side::Voxel)
}

/// Fused 2D features (`N x d2`) from paired 2D and 3D features.
pub fn fuse_2d(f2d: &Tensor, f3d: &Tensor, params: &ParamSet, heads: usize, scale: usize) -> Result<Tensor> {
    fuse(f2d, f3d, params, heads, scale, Side::Image)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::sum;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn micro(seed: u64, n: usize, d1: usize, d2: usize, heads: usize) -> (DmfConfig, ParamSet, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DmfConfig { heads, widths_3d: vec![d1], widths_2d: vec![d2] };
        let mut params = ParamSet::new();
        cfg.init(&mut rng, &mut params).unwrap();
        // non-zero biases so the oracle covers them
        let params = params
            .map_values(|name, t| Ok(if name.ends_with(".b") { rand_vec(&mut rng, t.numel()) } else { t.data().to_vec() }))
            .unwrap();
        let f3 = Tensor::new(&[n, d1], rand_vec(&mut rng, n * d1)).unwrap();
        let f2 = Tensor::new(&[n, d2], rand_vec(&mut rng, n * d2)).unwrap();
        (cfg, params, f3, f2)
    }

    /// Scalar-loop evaluation of one side's fusion.
    fn straight_line(own: &[f64], other: &[f64], n: usize, d: usize, dq: usize, heads: usize, w: impl Fn(&str) -> Vec<f64>) -> Vec<f64> {
        let (wk, wv, wq, we, wo, bo) = (w("key"), w("value"), w("query"), w("expand"), w("out.w"), w("out.b"));
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let x = &own[i * d..(i + 1) * d];
            let y = &other[i * dq..(i + 1) * dq];
            let proj = |m: &[f64], v: &[f64], rows: usize, col: usize| (0..rows).map(|r| v[r] * m[r * d + col]).sum::<f64>();
            let k: Vec<f64> = (0..d).map(|c| proj(&wk, x, d, c)).collect();
            let v: Vec<f64> = (0..d).map(|c| proj(&wv, x, d, c)).collect();
            let q: Vec<f64> = (0..d).map(|c| proj(&wq, y, dq, c)).collect();
            let scores: Vec<f64> = (0..heads).map(|h| (0..dh).map(|c| k[h * dh + c] * q[h * dh + c]).sum()).collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            let mut m = vec![0.0; dh];
            for h in 0..heads {
                for c in 0..dh {
                    m[c] += ex[h] / z * v[h * dh + c];
                }
            }
            let e: Vec<f64> = (0..d).map(|c| (0..dh).map(|r| m[r] * we[r * d + c]).sum()).collect();
            for c in 0..d {
                let mut acc = bo[c];
                for r in 0..d {
                    acc += e[r] * wo[r * d + c] + x[r] * wo[(d + r) * d + c];
                }
                out[i * d + c] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_straight_line_evaluation() {
        for seed in 0..1000 {
            let (d1, d2) = if seed % 2 == 0 { (8, 8) } else { (8, 12) };
            let (cfg, params, f3, f2) = micro(seed, 3, d1, d2, 4);
            let g3 = fuse_3d(&f3, &f2, &params, cfg.heads, 0).unwrap();
            let g2 = fuse_2d(&f2, &f3, &params, cfg.heads, 0).unwrap();
            let params = &params;
            let w = |side| move |part: &str| params.get(&param_name(0, side, part)).unwrap().data().to_vec();
            let r3 = straight_line(f3.data(), f2.data(), 3, d1, d2, 4, w(Side::Voxel));
            let r2 = straight_line(f2.data(), f3.data(), 3, d2, d1, 4, w(Side::Image));
            for (a, b) in g3.data().iter().zip(&r3).chain(g2.data().iter().zip(&r2)) {
                assert!((a - b).abs() <= 1e-10, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_closed_forms() {
        // equal scores -> uniform
        let k = Tensor::new(&[1, 4, 2], vec![1.0; 8]).unwrap();
        let a = attention_weights(&k, &k).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // scores [0, ln 2] at H = 2
        let k = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 0.0, 2f64.ln()]).unwrap();
        let a = attention_weights(&k, &q).unwrap();
        assert!((a.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (a.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        // adding c to every score of a pair leaves its row unchanged
        let q2 = Tensor::new(&[1, 2, 2], vec![5.0, 0.0, 0.0, 5.0 + 2f64.ln()]).unwrap();
        let b = attention_weights(&k, &q2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            attention_weights(&k, &Tensor::new(&[1, 1, 4], vec![0.0; 4]).unwrap()),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Tensor::new(&[50, 4, 3], rand_vec(&mut rng, 600)).unwrap();
        let q = Tensor::new(&[50, 4, 3], rand_vec(&mut rng, 600)).unwrap();
        let a = attention_weights(&k, &q).unwrap();
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_values_leave_only_the_self_path() {
        let (cfg, params, f3, f2) = micro(7, 5, 8, 8, 4);
        let zeroed = params
            .map_values(|name, t| Ok(if name.ends_with("value") { vec![0.0; t.numel()] } else { t.data().to_vec() }))
            .unwrap();
        let g = fuse_3d(&f3, &f2, &zeroed, cfg.heads, 0).unwrap();
        let wo = zeroed.get(&param_name(0, Side::Voxel, "out.w")).unwrap();
        let bottom = Tensor::new(&[8, 8], wo.data()[64..].to_vec()).unwrap();
        let expect = add_bias(&matmul(&f3, &bottom).unwrap(), zeroed.get(&param_name(0, Side::Voxel, "out.b")).unwrap()).unwrap();
        assert_eq!(g.data(), expect.data());
        let other = Tensor::new(&[5, 8], vec![3.0; 40]).unwrap();
        assert_eq!(fuse_3d(&f3, &other, &zeroed, cfg.heads, 0).unwrap().data(), g.data());
        let g2 = fuse_2d(&f2, &f3, &zeroed, cfg.heads, 0).unwrap();
        assert_eq!(fuse_2d(&f2, &other, &zeroed, cfg.heads, 0).unwrap().data(), g2.data());
    }

    #[test]
    fn fusion_is_per_pair_local_and_equivariant() {
        let (cfg, params, f3, f2) = micro(3, 6, 8, 8, 4);
        let g = fuse_3d(&f3, &f2, &params, cfg.heads, 0).unwrap();
        let perm = [4, 0, 5, 2, 1, 3];
        let permute = |t: &Tensor| crate::tensor::gather_rows(t, &perm).unwrap();
        let gp = fuse_3d(&permute(&f3), &permute(&f2), &params, cfg.heads, 0).unwrap();
        assert_eq!(gp.data(), permute(&g).data());
        let mut changed = f2.data().to_vec();
        changed[2 * 8..3 * 8].iter_mut().for_each(|v| *v += 1.0);
        let gc = fuse_3d(&f3, &Tensor::new(&[6, 8], changed).unwrap(), &params, cfg.heads, 0).unwrap();
        for i in 0..6 {
            let same = g.data()[i * 8..(i + 1) * 8] == gc.data()[i * 8..(i + 1) * 8];
            assert_eq!(same, i != 2, "pair {i}");
        }
    }

    #[test]
    fn pair_count_mismatch_is_contract_error() {
        let (cfg, params, f3, _) = micro(0, 3, 8, 8, 4);
        let f2 = Tensor::new(&[2, 8], vec![0.0; 16]).unwrap();
        assert!(matches!(fuse_3d(&f3, &f2, &params, cfg.heads, 0), Err(crate::Error::Contract(_))));
        assert!(matches!(fuse_2d(&f2, &f3, &params, cfg.heads, 0), Err(crate::Error::Contract(_))));
        assert!(DmfConfig { heads: 3, widths_3d: vec![8], widths_2d: vec![8] }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cfg, params, f3, f2) = micro(21, 3, 8, 4, 4);
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut inputs: Vec<(Vec<usize>, Vec<f64>)> =
            params.iter().map(|(_, t)| (t.shape().to_vec(), t.data().to_vec())).collect();
        inputs.push((f3.shape().to_vec(), f3.data().to_vec()));
        inputs.push((f2.shape().to_vec(), f2.data().to_vec()));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w3 = Tensor::new(&[3, 8], rand_vec(&mut rng, 24)).unwrap();
        let w2 = Tensor::new(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
        let report = check_gradients(&inputs, 1e-6, |ts| {
            let mut p = ParamSet::new();
            for (n, t) in names.iter().zip(ts) {
                p.insert_tensor(n.clone(), t.clone())?;
            }
            let (a, b) = (&ts[names.len()], &ts[names.len() + 1]);
            let g3 = fuse_3d(a, b, &p, cfg.heads, 0)?;
            let g2 = fuse_2d(b, a, &p, cfg.heads, 0)?;
            Ok(crate::tensor::add(&sum(&mul(&g3, &w3)?), &sum(&mul(&g2, &w2)?))?)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
    }
}
