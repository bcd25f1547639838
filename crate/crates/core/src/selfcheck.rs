//! Built-in verification suites run by the `selfcheck` command: gradients
//! against finite differences, the pseudo-label rules against a direct
//! evaluator, the EMA schedule against its unrolled closed form, and the
//! renderer/projection round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::branches::{forward_2d, forward_3d, BranchConfig, VoxelInput};
use crate::dmf::{fuse_2d, fuse_3d, DmfConfig};
use crate::error::Result;
use crate::geometry::{build_pairs, densify_on_image, project_points};
use crate::plo::{optimize_2d, optimize_3d};
use crate::scene::{generate_scene, render_views, GeneratorConfig};
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::*;
use crate::trainer::EmaState;

/// Largest accepted norm-wise relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub suite: String,
    pub cases: usize,
    /// First failing case, if any.
    pub failure: Option<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
type Scalarize = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// One randomized gradient check: named function over named inputs.
pub struct GradCase {
    pub name: String,
    pub inputs: Inputs,
    pub f: Scalarize,
}

impl GradCase {
    pub fn run(&self) -> Result<f64> {
        Ok(check_gradients(&self.inputs, FD_STEP, &self.f)?.max_rel_error())
    }
}

/// Values bounded away from zero so no ReLU kink sits inside `+-h`.
fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// `sum(t * w)` for fixed random `w`: a scalar that weights every output.
fn probe(t: &Tensor, w: &[f64]) -> Result<Tensor> {
    Ok(sum(&mul(t, &Tensor::new(t.shape(), w.to_vec())?)?))
}

fn case(name: &str, inputs: Inputs, out_len: usize, rng: &mut ChaCha8Rng, f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> GradCase {
    let w = values(rng, out_len);
    GradCase { name: name.into(), inputs, f: Box::new(move |ts| probe(&f(ts)?, &w)) }
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), values(rng, shape.iter().product()))
}

/// One round of cases covering every differentiable op.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..5));
    let mut cases = Vec::new();
    let mn = vec![m, n];
    cases.push(case("add", vec![input(rng, &mn), input(rng, &mn)], m * n, rng, |t| add(&t[0], &t[1])));
    cases.push(case("sub", vec![input(rng, &mn), input(rng, &mn)], m * n, rng, |t| sub(&t[0], &t[1])));
    cases.push(case("mul", vec![input(rng, &mn), input(rng, &mn)], m * n, rng, |t| mul(&t[0], &t[1])));
    let s = rng.random_range(-2.0..2.0);
    cases.push(case("scale", vec![input(rng, &mn)], m * n, rng, move |t| Ok(scale(&t[0], s))));
    cases.push(case("add_bias", vec![input(rng, &mn), input(rng, &[n])], m * n, rng, |t| add_bias(&t[0], &t[1])));
    cases.push(case("relu", vec![input(rng, &mn)], m * n, rng, |t| Ok(relu(&t[0]))));
    cases.push(case("reshape", vec![input(rng, &mn)], m * n, rng, move |t| reshape(&t[0], &[n, m])));
    cases.push(case("matmul", vec![input(rng, &[m, k]), input(rng, &[k, n])], m * n, rng, |t| matmul(&t[0], &t[1])));
    let b = rng.random_range(1..4);
    cases.push(case("bmm", vec![input(rng, &[b, m, k]), input(rng, &[b, k, n])], b * m * n, rng, |t| bmm(&t[0], &t[1])));
    let axis = rng.random_range(0..3);
    cases.push(case("softmax", vec![input(rng, &[m, k, n])], m * k * n, rng, move |t| softmax(&t[0], axis)));
    let out = [k * n, m * n, m * k][axis];
    cases.push(case("sum_axis", vec![input(rng, &[m, k, n])], out, rng, move |t| sum_axis(&t[0], axis)));
    cases.push(case("sum", vec![input(rng, &mn)], 1, rng, |t| Ok(sum(&t[0]))));
    cases.push(case("mean", vec![input(rng, &mn)], 1, rng, |t| Ok(mean(&t[0]))));
    cases.push(case("sq_norm_last", vec![input(rng, &mn)], m, rng, |t| sq_norm_last(&t[0])));
    cases.push(case("concat", vec![input(rng, &[m, n]), input(rng, &[k, n])], (m + k) * n, rng, |t| concat(&t[..2], 0)));
    let labels: Vec<usize> = (0..m).map(|_| if rng.random_bool(0.2) { n } else { rng.random_range(0..n) }).collect();
    cases.push(case("cross_entropy", vec![input(rng, &mn)], 1, rng, move |t| cross_entropy(&t[0], &labels, n)));
    let (h, w, ci, co): (usize, usize, usize, usize) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..3), rng.random_range(1..3));
    let stride = rng.random_range(1..3);
    let conv_out = h.div_ceil(stride) * w.div_ceil(stride) * co;
    cases.push(case("conv2d", vec![input(rng, &[h, w, ci]), input(rng, &[3, 3, ci, co])], conv_out, rng, move |t| conv2d(&t[0], &t[1], stride)));
    let d: usize = rng.random_range(1..4);
    let conv3_out = d.div_ceil(stride) * h.div_ceil(stride) * w.div_ceil(stride) * co;
    cases.push(case("conv3d", vec![input(rng, &[d, h, w, ci]), input(rng, &[3, 3, 3, ci, co])], conv3_out, rng, move |t| conv3d(&t[0], &t[1], stride)));
    let (th, tw) = (2 * h - rng.random_range(0..2), 2 * w - rng.random_range(0..2));
    cases.push(case("upsample2d", vec![input(rng, &[h, w, ci])], th * tw * ci, rng, move |t| upsample2d(&t[0], [th, tw])));
    let td = 2 * d - rng.random_range(0..2);
    cases.push(case("upsample3d", vec![input(rng, &[d, h, w, ci])], td * th * tw * ci, rng, move |t| upsample3d(&t[0], [td, th, tw])));
    let idx: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..m)).collect();
    let gathered = idx.len() * n;
    let gidx = idx.clone();
    cases.push(case("gather_rows", vec![input(rng, &mn)], gathered, rng, move |t| gather_rows(&t[0], &gidx)));
    cases.push(case("scatter_mean_replace", vec![input(rng, &mn), input(rng, &[idx.len(), n])], m * n, rng, move |t| {
        scatter_mean_replace(&t[0], &idx, &t[1])
    }));
    cases
}

/// Both fusion directions on random micro-instances, differentiated with
/// respect to both feature inputs and every fusion parameter.
pub fn fusion_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let heads = rng.random_range(1..3);
    let (d3, d2) = (heads * rng.random_range(1..3), heads * rng.random_range(1..3));
    let n = rng.random_range(1..4);
    let cfg = DmfConfig { heads, widths_3d: vec![d3], widths_2d: vec![d2] };
    let mut params = ParamSet::new();
    cfg.init(rng, &mut params).expect("valid micro config");
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs: Inputs = vec![input(rng, &[n, d3]), input(rng, &[n, d2])];
    inputs.extend(params.iter().map(|(_, t)| (t.shape().to_vec(), t.data().to_vec())));
    let rebuild = move |ts: &[Tensor]| -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (name, t) in names.iter().zip(&ts[2..]) {
            p.insert_tensor(name.clone(), t.clone())?;
        }
        Ok(p)
    };
    let r2 = rebuild.clone();
    vec![
        case("fuse_3d", inputs.clone(), n * d3, rng, move |t| fuse_3d(&t[0], &t[1], &rebuild(t)?, heads, 0)),
        case("fuse_2d", inputs, n * d2, rng, move |t| fuse_2d(&t[1], &t[0], &r2(t)?, heads, 0)),
    ]
}

/// Tiny voxel and image U-Nets with non-trivial decoder hooks,
/// differentiated with respect to every branch parameter.
pub fn branch_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let cfg = BranchConfig { widths_3d: vec![2, 3], widths_2d: vec![2, 4], num_classes: 3, voxel_size: 0.05, max_grid_extent: 32 };
    let mut params = ParamSet::new();
    cfg.init_params(rng, &mut params).expect("valid micro config");
    let split = |prefix: &str| -> (Vec<String>, Inputs) {
        params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().to_vec())))
            .unzip()
    };
    fn rebuild(names: &[String], ts: &[Tensor]) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (n, t) in names.iter().zip(ts) {
            p.insert_tensor(n.clone(), t.clone())?;
        }
        Ok(p)
    }

    let pts: Vec<[f32; 3]> = (0..4).map(|_| [rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), rng.random_range(0.0..0.1)]).collect();
    let cols: Vec<[f32; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let voxels = VoxelInput::from_points(&pts, &cols, [0.2, 0.2, 0.1], &cfg).expect("points inside the room");
    let (n3, in3) = split("b3.");
    let net3 = cfg.unet_3d();
    let c3 = case("branch_3d", in3, 4 * 3, rng, move |t| {
        let mut hook = |s: usize, x: &Tensor| Ok(scale(x, 1.0 + 0.5 * s as f64));
        Ok(forward_3d(&voxels, &net3, &rebuild(&n3, t)?, &mut hook)?.probs)
    });

    let image: Vec<f64> = (0..6 * 6 * 3).map(|_| rng.random()).collect();
    let (n2, in2) = split("b2.");
    let net2 = cfg.unet_2d();
    let c2 = case("branch_2d", in2, 36 * 3, rng, move |t| {
        let mut hook = |_s: usize, x: &Tensor| Ok(scale(x, 0.7));
        Ok(forward_2d(&image, 6, 6, &[1, 7, 20, 35], &net2, &rebuild(&n2, t)?, &mut hook)?.probs)
    });
    vec![c3, c2]
}

/// All gradient cases for `rounds` random draws.
pub fn gradient_cases(seed: u64, rounds: usize) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for r in 0..rounds {
        cases.extend(op_cases(&mut rng));
        cases.extend(fusion_cases(&mut rng));
        if r < 2 {
            cases.extend(branch_cases(&mut rng));
        }
    }
    cases
}

pub fn gradient_suite(seed: u64) -> Result<SuiteOutcome> {
    let cases = gradient_cases(seed, 5);
    let mut failure = None;
    for c in &cases {
        let err = c.run()?;
        if !(err <= GRAD_TOL) {
            failure = Some(format!("{}: relative error {err:.3e}", c.name));
            break;
        }
    }
    Ok(SuiteOutcome { suite: "gradients".into(), cases: cases.len(), failure })
}

/// The retention rule written out directly.
fn expected(coarse: usize, vote: Option<usize>, conf: f64, t: f64) -> Option<usize> {
    let agrees = matches!(vote, Some(v) if v == coarse);
    if agrees || conf > t {
        Some(coarse)
    } else {
        None
    }
}

pub fn plo_suite(seed: u64, triples: usize) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 6;
    let coarse: Vec<usize> = (0..triples).map(|_| rng.random_range(0..classes)).collect();
    let vote: Vec<Option<usize>> = (0..triples).map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..classes))).collect();
    // a share of confidences lands exactly on the thresholds
    let sweep = [0.6, 0.85, 0.9, 0.95];
    let conf: Vec<f64> = (0..triples)
        .map(|_| if rng.random_bool(0.1) { sweep[rng.random_range(0..4)] } else { rng.random_range(1.0 / classes as f64..=1.0) })
        .collect();
    let mut failure = None;
    let mut previous: Option<Vec<Option<usize>>> = None;
    for &t in &sweep {
        let got3 = optimize_3d(&coarse, &vote, &conf, t);
        let got2 = optimize_2d(&coarse, &vote, &conf, t);
        for i in 0..triples {
            let want = expected(coarse[i], vote[i], conf[i], t);
            if got3[i] != want || got2[i] != want {
                failure.get_or_insert(format!("t_conf {t}, triple {i}: ({}, {:?}, {}) gave {:?}", coarse[i], vote[i], conf[i], got3[i]));
            }
        }
        // raising the threshold only deletes
        if let Some(prev) = &previous {
            if let Some(i) = (0..triples).find(|&i| got3[i].is_some() && prev[i].is_none()) {
                failure.get_or_insert(format!("t_conf {t}: triple {i} retained only at the higher threshold"));
            }
        }
        previous = Some(got3);
    }
    SuiteOutcome { suite: "pseudo-labels".into(), cases: triples * sweep.len(), failure }
}

/// Teacher value after `k` updates, starting at step `s0` from teacher `w0`,
/// towards a constant student `w`: `w + (w0 - w) * prod(decay_s)`.
pub fn ema_unrolled(w0: f64, w: f64, t_ema: f64, s0: u64, k: u64) -> f64 {
    let prod: f64 = (s0..s0 + k).map(|s| (1.0 - 1.0 / (s as f64 + 1.0)).min(t_ema)).product();
    w + (w0 - w) * prod
}

pub fn ema_suite() -> Result<SuiteOutcome> {
    let mut student = ParamSet::new();
    student.insert("w", &[3], vec![0.25, -1.5, 3.0])?;
    let mut teacher0 = ParamSet::new();
    teacher0.insert("w", &[3], vec![2.0, 0.5, -1.0])?;
    let mut failure = None;
    let mut cases = 0;
    // from s = 0 the first update is an exact copy; later starts decay gradually
    for s0 in [0, 1, 4, 30] {
        let mut st = EmaState { step: s0, t_ema: 0.9, teacher: crate::trainer::constants(&teacher0)? };
        for k in 1..=60u64 {
            st.update(&student)?;
            cases += 1;
            for (i, (&got, &w)) in st.teacher.get("w")?.data().iter().zip(student.get("w")?.data()).enumerate() {
                let want = ema_unrolled(teacher0.get("w")?.data()[i], w, 0.9, s0, k);
                let ok = if s0 == 0 { got == w } else { (got - want).abs() <= 1e-12 };
                if !ok {
                    failure.get_or_insert(format!("start {s0}, step {k}, element {i}: {got} vs {want}"));
                }
            }
        }
    }
    Ok(SuiteOutcome { suite: "ema".into(), cases, failure })
}

pub fn projection_suite(seed: u64) -> Result<SuiteOutcome> {
    let cfg = GeneratorConfig::default();
    let scene = generate_scene(seed, &cfg)?;
    let views = render_views(&scene, cfg.n_views, seed, &cfg)?;
    let mut failure = None;
    let mut cases = 0;
    for v in &views {
        let pairs = build_pairs(&scene, v)?;
        let proj = project_points(&scene.points, v)?;
        for (&p, &px) in pairs.points.iter().zip(&pairs.pixels) {
            cases += 1;
            let pp = proj[p];
            let at = pp.pixel.map(|(r, c)| r * v.width + c);
            let depth_gap = (pp.depth - f64::from(v.depth[px])).abs();
            if at != Some(px) || depth_gap > 1e-6 {
                failure.get_or_insert(format!("view {}: point {p} re-projects to {at:?}, recorded {px}, depth gap {depth_gap:e}", v.view_index));
            }
        }
        // densification against a direct window scan
        let c = 2;
        let vecs: Vec<f64> = pairs.points.iter().flat_map(|&p| [f64::from(scene.labels[p]), p as f64]).collect();
        let map = densify_on_image(&vecs, c, &pairs, 5)?;
        let mut at_pixel = vec![None; v.height * v.width];
        for (k, &px) in pairs.pixels.iter().enumerate() {
            at_pixel[px] = Some(k);
        }
        for px in 0..v.height * v.width {
            let (r, col) = ((px / v.width) as isize, (px % v.width) as isize);
            let want: Option<Vec<f64>> = match at_pixel[px] {
                Some(k) => Some(vecs[k * c..(k + 1) * c].to_vec()),
                None => {
                    let mut acc = vec![0.0; c];
                    let mut n = 0.0;
                    for rr in r - 2..=r + 2 {
                        for cc in col - 2..=col + 2 {
                            if rr < 0 || cc < 0 || rr >= v.height as isize || cc >= v.width as isize {
                                continue;
                            }
                            if let Some(k) = at_pixel[rr as usize * v.width + cc as usize] {
                                acc.iter_mut().zip(&vecs[k * c..(k + 1) * c]).for_each(|(a, b)| *a += b);
                                n += 1.0;
                            }
                        }
                    }
                    (n > 0.0).then(|| acc.iter().map(|a| a / n).collect())
                }
            };
            let got = map.covered[px].then(|| map.pixel(px).to_vec());
            if got != want {
                failure.get_or_insert(format!("view {}: densified pixel {px} differs from the window scan", v.view_index));
            }
        }
    }
    Ok(SuiteOutcome { suite: "projection".into(), cases, failure })
}

/// Every suite, in order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![gradient_suite(seed)?, plo_suite(seed, 10_000), ema_suite()?, projection_suite(seed)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unrolled_schedule_closed_form() {
        assert_eq!(ema_unrolled(5.0, 1.0, 0.999, 0, 1), 1.0);
        // decays 1/2, 2/3, 0.7 with t_ema = 0.7
        assert!((ema_unrolled(1.0, 0.0, 0.7, 1, 3) - 0.5 * 2.0 / 3.0 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn quick_suites_pass() {
        assert!(plo_suite(1, 2000).passed());
        assert!(ema_suite().unwrap().passed());
        let p = projection_suite(2).unwrap();
        assert!(p.passed(), "{:?}", p.failure);
        assert!(p.cases > 0);
    }

    #[test]
    fn gradient_round_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in op_cases(&mut rng).iter().chain(&fusion_cases(&mut rng)) {
            let e = c.run().unwrap();
            assert!(e <= GRAD_TOL, "{}: {e}", c.name);
        }
    }
}
