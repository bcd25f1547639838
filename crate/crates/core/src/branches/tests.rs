use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{mul, scale, sum};

fn tiny_config() -> BranchConfig {
    BranchConfig { widths_3d: vec![2, 3], widths_2d: vec![2, 4], num_classes: 3, voxel_size: 0.05, max_grid_extent: 32 }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f32) -> (Vec<[f32; 3]>, Vec<[f32; 3]>) {
    let pts = (0..n).map(|_| [rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent / 2.0)]).collect();
    let cols = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    (pts, cols)
}

#[test]
fn voxel_means_match_brute_force_grouping() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pts, cols) = random_cloud(&mut rng, 3000, 0.6);
    let g = voxelize(&pts, &cols, 0.05, [12, 12, 8]).unwrap();
    let mut groups: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in pts.iter().enumerate() {
        let key = |v: f32| (f64::from(v) / 0.05).floor() as i64;
        groups.entry((key(p[0]), key(p[1]), key(p[2]))).or_default().push(i);
    }
    assert_eq!(g.occupied(), groups.len());
    for ((x, y, z), members) in &groups {
        let cell = g.cell_index([*x as usize, *y as usize, *z as usize]);
        for c in 0..3 {
            let mean = members.iter().map(|&i| f64::from(cols[i][c])).sum::<f64>() / members.len() as f64;
            assert!((g.features[cell * 4 + c] - mean).abs() < 1e-12);
        }
        assert_eq!(g.features[cell * 4 + 3], 1.0);
        for &i in members {
            assert_eq!(g.point_coords[i], [*x as usize, *y as usize, *z as usize]);
        }
    }
}

/// Straight composition of the voxel U-Net without any hook plumbing.
fn plain_unet_3d(input: &VoxelInput, net_widths: &[usize], params: &ParamSet) -> Tensor {
    let p = |n: &str| params.get(&format!("b3.{n}")).unwrap().clone();
    let mut skips = vec![relu(&conv3d(&input.tensor().unwrap(), &p("enc0"), 1).unwrap())];
    for l in 1..net_widths.len() {
        let down = relu(&conv3d(skips.last().unwrap(), &p(&format!("down{l}")), 2).unwrap());
        skips.push(relu(&conv3d(&down, &p(&format!("enc{l}")), 1).unwrap()));
    }
    let mut h = skips.last().unwrap().clone();
    for l in (0..net_widths.len() - 1).rev() {
        let s = &skips[l];
        let up = upsample3d(&h, [s.shape()[0], s.shape()[1], s.shape()[2]]).unwrap();
        h = relu(&conv3d(&concat(&[up, s.clone()], 3).unwrap(), &p(&format!("dec{l}")), 1).unwrap());
    }
    let rows = reshape(&h, &[h.numel() / net_widths[0], net_widths[0]]).unwrap();
    let pts = gather_rows(&rows, &input.level_cells[0]).unwrap();
    softmax(&add_bias(&matmul(&pts, &p("head.w")).unwrap(), &p("head.b")).unwrap(), 1).unwrap()
}

fn plain_unet_2d(image: &[f64], h: usize, w: usize, widths: &[usize], params: &ParamSet) -> Tensor {
    let p = |n: &str| params.get(&format!("b2.{n}")).unwrap().clone();
    let x = Tensor::new(&[h, w, 3], image.to_vec()).unwrap();
    let mut skips = vec![relu(&conv2d(&x, &p("enc0"), 1).unwrap())];
    for l in 1..widths.len() {
        let down = relu(&conv2d(skips.last().unwrap(), &p(&format!("down{l}")), 2).unwrap());
        skips.push(relu(&conv2d(&down, &p(&format!("enc{l}")), 1).unwrap()));
    }
    let mut f = skips.last().unwrap().clone();
    for l in (0..widths.len() - 1).rev() {
        let s = &skips[l];
        let up = upsample2d(&f, [s.shape()[0], s.shape()[1]]).unwrap();
        f = relu(&conv2d(&concat(&[up, s.clone()], 2).unwrap(), &p(&format!("dec{l}")), 1).unwrap());
    }
    let rows = reshape(&f, &[h * w, widths[0]]).unwrap();
    softmax(&add_bias(&matmul(&rows, &p("head.w")).unwrap(), &p("head.b")).unwrap(), 1).unwrap()
}

fn setup(seed: u64, cfg: &BranchConfig) -> (VoxelInput, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, cols) = random_cloud(&mut rng, 200, 0.38);
    let input = VoxelInput::from_points(&pts, &cols, [0.4, 0.4, 0.2], cfg).unwrap();
    let mut params = ParamSet::new();
    cfg.init_params(&mut rng, &mut params).unwrap();
    (input, params)
}

#[test]
fn identity_hooks_reproduce_plain_unets() {
    let cfg = BranchConfig { widths_3d: vec![4, 6, 8], widths_2d: vec![4, 6, 8], ..tiny_config() };
    let (input, params) = setup(11, &cfg);
    let out = forward_3d(&input, &cfg.unet_3d(), &params, &mut identity_hook).unwrap();
    assert_eq!(out.probs.shape(), &[200, 3]);
    assert_eq!(out.features.len(), 3);
    let widths: Vec<usize> = out.features.iter().map(|f| f.shape()[1]).collect();
    assert_eq!(widths, cfg.fused_widths_3d());
    assert_eq!(out.probs.data(), plain_unet_3d(&input, &cfg.widths_3d, &params).data());
    for row in out.probs.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (9, 7);
    let image: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
    let pixels = vec![0, 5, 17, 40, 62];
    let out2 = forward_2d(&image, h, w, &pixels, &cfg.unet_2d(), &params, &mut identity_hook).unwrap();
    assert_eq!(out2.probs.shape(), &[h * w, 3]);
    let map_widths: Vec<usize> = out2.features.iter().map(|f| f.shape()[2]).collect();
    assert_eq!(map_widths, cfg.fused_widths_2d());
    assert_eq!(out2.features[0].shape(), &[3, 2, 8]);
    assert_eq!(out2.probs.data(), plain_unet_2d(&image, h, w, &cfg.widths_2d, &params).data());
}

#[test]
fn forward_is_deterministic_and_hooks_matter() {
    let cfg = tiny_config();
    let (input, params) = setup(2, &cfg);
    let a = forward_3d(&input, &cfg.unet_3d(), &params, &mut identity_hook).unwrap();
    let b = forward_3d(&input, &cfg.unet_3d(), &params, &mut identity_hook).unwrap();
    assert_eq!(a.probs.data(), b.probs.data());
    let mut double = |_s: usize, x: &Tensor| Ok(scale(x, 2.0));
    let c = forward_3d(&input, &cfg.unet_3d(), &params, &mut double).unwrap();
    assert_ne!(a.probs.data(), c.probs.data());
}

#[test]
fn wrong_hook_shape_is_contract_error() {
    let cfg = tiny_config();
    let (input, params) = setup(4, &cfg);
    let mut bad = |_s: usize, x: &Tensor| gather_rows(x, &[0, 1]);
    let r = forward_3d(&input, &cfg.unet_3d(), &params, &mut bad);
    assert!(matches!(r, Err(crate::Error::Contract(_))));
    let image = vec![0.5; 8 * 8 * 3];
    let r2 = forward_2d(&image, 8, 8, &[1, 2, 3], &cfg.unet_2d(), &params, &mut bad);
    assert!(matches!(r2, Err(crate::Error::Contract(_))));
}

fn as_inputs(params: &ParamSet, prefix: &str) -> (Vec<String>, Vec<(Vec<usize>, Vec<f64>)>) {
    params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().to_vec())))
        .unzip()
}

fn rebuild(names: &[String], ts: &[Tensor]) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in names.iter().zip(ts) {
        p.insert_tensor(n.clone(), t.clone()).unwrap();
    }
    p
}

#[test]
fn voxel_branch_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts = vec![[0.02, 0.03, 0.01], [0.13, 0.04, 0.06], [0.14, 0.17, 0.02], [0.07, 0.12, 0.08]];
    let cols = vec![[0.9, 0.1, 0.2], [0.2, 0.8, 0.3], [0.3, 0.3, 0.9], [0.6, 0.5, 0.1]];
    let input = VoxelInput::from_points(&pts, &cols, [0.2, 0.2, 0.1], &cfg).unwrap();
    let mut params = ParamSet::new();
    cfg.unet_3d().init(&mut rng, &mut params).unwrap();
    let (names, inputs) = as_inputs(&params, "b3.");
    let weights: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = cfg.unet_3d();
    let report = check_gradients(&inputs, 1e-6, |ts| {
        let p = rebuild(&names, ts);
        let mut hook = |s: usize, x: &Tensor| Ok(scale(x, 1.0 + 0.5 * s as f64));
        let out = forward_3d(&input, &net, &p, &mut hook)?;
        Ok(sum(&mul(&out.probs, &Tensor::new(&[4, 3], weights.clone())?)?))
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
}

#[test]
fn image_branch_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random()).collect();
    let mut params = ParamSet::new();
    cfg.unet_2d().init(&mut rng, &mut params).unwrap();
    let (names, inputs) = as_inputs(&params, "b2.");
    let weights: Vec<f64> = (0..64 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = cfg.unet_2d();
    let report = check_gradients(&inputs, 1e-6, |ts| {
        let p = rebuild(&names, ts);
        let mut hook = |_s: usize, x: &Tensor| Ok(scale(x, 0.7));
        let out = forward_2d(&image, 8, 8, &[3, 9, 10, 44, 63], &net, &p, &mut hook)?;
        Ok(sum(&mul(&out.probs, &Tensor::new(&[64, 3], weights.clone())?)?))
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
}

#[test]
fn unet_param_shapes() {
    let names: Vec<String> = tiny_config().unet_3d().param_shapes().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["b3.enc0", "b3.down1", "b3.enc1", "b3.dec0", "b3.head.w", "b3.head.b"]);
    let shapes = tiny_config().unet_2d().param_shapes();
    assert_eq!(shapes[3].1, vec![3, 3, 6, 2]);
}
