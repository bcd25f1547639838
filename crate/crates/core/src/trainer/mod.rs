//! Two-stream semi-supervised training.
//!
//! Phase 1 trains the student on labeled scenes only. In phase 2 each step
//! also takes one unlabeled scene: a teacher (the EMA of the student, or the
//! student itself) labels it, the labels are filtered by cross-modal voting,
//! and the student is trained on what survives. One SGD step per iteration.

mod config;
mod ema;
mod eval;
mod loss;
mod model;

pub use config::{ablation_by_name, Ablation, RunConfig};
pub use ema::{constants, EmaState};
pub use eval::{evaluate, EvalReport};
pub use loss::{consistency_loss, paired_consistency, total_loss, LossReport, LossTerms};
pub use model::{forward, projected_targets, DualOutput, ModelConfig, SceneData, ViewData};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::plo::{densify_2d_pseudo, extract_coarse, optimize_2d, optimize_3d, point_votes, PloStats, PloViewDump, PseudoLabelSet};
use crate::scene::{Dataset, Split};
use crate::tensor::{concat, cross_entropy, save_checkpoint, ParamSet, Tensor};

/// Scenes of one dataset prepared for a model configuration.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub num_classes: usize,
    pub labeled: Vec<SceneData>,
    pub unlabeled: Vec<SceneData>,
    pub val: Vec<SceneData>,
}

impl TrainData {
    pub fn prepare(ds: &Dataset, cfg: &RunConfig) -> Result<TrainData> {
        let data = TrainData {
            num_classes: ds.manifest.num_classes,
            labeled: prepare_split(ds, cfg, Split::Labeled)?,
            unlabeled: prepare_split(ds, cfg, Split::Unlabeled)?,
            val: prepare_split(ds, cfg, Split::Val)?,
        };
        if data.labeled.is_empty() {
            bail!(Config, "dataset has no labeled split");
        }
        if data.val.is_empty() {
            bail!(Config, "dataset has no val split");
        }
        Ok(data)
    }
}

/// The scenes of one split, in manifest order.
pub fn prepare_split(ds: &Dataset, cfg: &RunConfig, split: Split) -> Result<Vec<SceneData>> {
    cfg.validate()?;
    let branches = cfg.model(ds.manifest.num_classes).branches;
    let room = ds.manifest.generator.room;
    ds.indices(split)
        .par_iter()
        .map(|&i| SceneData::prepare(&ds.scenes[i], &ds.views[i], cfg.views_per_scene, room, &branches, cfg.window))
        .collect()
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub uses_unlabeled: bool,
    pub steps: usize,
    /// Per-step mean of each loss term.
    pub loss: LossReport,
    /// Share of unlabeled points / pixels whose pseudo label survived.
    pub retained_3d: Option<f64>,
    pub retained_2d: Option<f64>,
    pub val: Option<EvalReport>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub records: Vec<EpochRecord>,
    pub student: ParamSet,
    pub teacher: Option<ParamSet>,
    /// Validation of the final student.
    pub final_eval: EvalReport,
}

impl TrainResult {
    /// The metric log as JSON lines.
    pub fn log_text(&self) -> Result<String> {
        log_text(&self.records)
    }
}

fn log_text(records: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Filtered pseudo labels of one unlabeled scene.
struct PseudoTargets {
    points: Vec<usize>,
    /// All views' pixels, concatenated in view order.
    pixels: Vec<usize>,
    retained: (usize, usize),
    dumps: Vec<PloViewDump>,
}

fn unfiltered(coarse: &[usize]) -> Vec<Option<usize>> {
    coarse.iter().map(|&c| Some(c)).collect()
}

fn pseudo_targets(cfg: &RunConfig, model: &ModelConfig, teacher: &ParamSet, scene: &SceneData) -> Result<PseudoTargets> {
    let c = scene.num_classes;
    let filter = cfg.ablation.plo_consistency;
    let out = forward(model, teacher, scene)?;
    if std::iter::once(&out.probs3).chain(&out.probs2).any(|t| t.data().iter().any(|v| !v.is_finite())) {
        bail!(NonFinite, "teacher output on scene {}", scene.id);
    }
    let p3 = out.probs3.data();
    let (coarse3, conf3) = extract_coarse(p3, c)?;
    let mut coarse2 = Vec::with_capacity(scene.views.len());
    for p in &out.probs2 {
        coarse2.push(extract_coarse(p.data(), c)?);
    }
    let per_view: Vec<(&[usize], Vec<usize>)> = scene
        .views
        .iter()
        .zip(&coarse2)
        .map(|(v, (l2, _))| (&v.pairs.points[..], v.pairs.pixels.iter().map(|&px| l2[px]).collect()))
        .collect();
    let vote3 = point_votes(&coarse3, &per_view);
    let opt3 = if filter { optimize_3d(&coarse3, &vote3, &conf3, cfg.t_conf) } else { unfiltered(&coarse3) };
    let set3 = PseudoLabelSet { coarse: coarse3, confidence: conf3, vote: vote3, optimized: opt3 };

    let mut pixels = Vec::new();
    let mut kept2 = 0;
    let mut dumps = Vec::new();
    for (view, (coarse, conf)) in scene.views.iter().zip(coarse2) {
        let pair_probs: Vec<f64> = view.pairs.points.iter().flat_map(|&p| p3[p * c..(p + 1) * c].iter().copied()).collect();
        let vote = densify_2d_pseudo(&pair_probs, c, &view.pairs, cfg.window)?;
        let optimized = if filter { optimize_2d(&coarse, &vote, &conf, cfg.t_conf) } else { unfiltered(&coarse) };
        let set2 = PseudoLabelSet { coarse, confidence: conf, vote, optimized };
        kept2 += set2.retained();
        pixels.extend(set2.targets(c));
        if cfg.plo_debug {
            let sub = |f: fn(&PseudoLabelSet, usize) -> Option<usize>| -> Vec<Option<usize>> { view.pairs.points.iter().map(|&p| f(&set3, p)).collect() };
            let view_points = PseudoLabelSet {
                coarse: view.pairs.points.iter().map(|&p| set3.coarse[p]).collect(),
                confidence: view.pairs.points.iter().map(|&p| set3.confidence[p]).collect(),
                vote: sub(|s, p| s.vote[p]),
                optimized: sub(|s, p| s.optimized[p]),
            };
            dumps.push(PloViewDump {
                scene_id: scene.id.clone(),
                view_index: view.pairs.view_index,
                t_conf: cfg.t_conf,
                points: PloStats::of(&view_points),
                pixels: PloStats::of(&set2),
            });
        }
    }
    Ok(PseudoTargets { points: set3.targets(c), pixels, retained: (set3.retained(), kept2), dumps })
}

fn image_targets(scene: &SceneData) -> Vec<usize> {
    scene.views.iter().flat_map(|v| v.targets.iter().copied()).collect()
}

/// Student cross-entropy terms of one scene plus its paired probability rows.
type Supervised = (Tensor, Tensor, Option<(Tensor, Tensor)>);

fn supervised(model: &ModelConfig, params: &ParamSet, scene: &SceneData, points: &[usize], pixels: &[usize]) -> Result<Supervised> {
    let c = scene.num_classes;
    let out = forward(model, params, scene)?;
    let l3 = cross_entropy(&out.logits3, points, c)?;
    let l2 = cross_entropy(&concat(&out.logits2, 0)?, pixels, c)?;
    Ok((l3, l2, out.paired_probs(scene)?))
}

fn mean_report(sum: &LossReport, steps: usize) -> LossReport {
    let n = steps.max(1) as f64;
    LossReport {
        l3d_labeled: sum.l3d_labeled / n,
        l2d_labeled: sum.l2d_labeled / n,
        l3d_unlabeled: sum.l3d_unlabeled / n,
        l2d_unlabeled: sum.l2d_unlabeled / n,
        consistency: sum.consistency / n,
        lambda_c: sum.lambda_c,
        total: sum.total / n,
    }
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.l3d_labeled += r.l3d_labeled;
    sum.l2d_labeled += r.l2d_labeled;
    sum.l3d_unlabeled += r.l3d_unlabeled;
    sum.l2d_unlabeled += r.l2d_unlabeled;
    sum.consistency += r.consistency;
    sum.lambda_c = r.lambda_c;
    sum.total += r.total;
}

#[derive(Serialize)]
struct NanDump<'a> {
    reason: &'a str,
    epoch: usize,
    step: usize,
    labeled_scene: &'a str,
    unlabeled_scene: Option<&'a str>,
    loss: LossReport,
    non_finite_params: Vec<String>,
}

fn non_finite(params: &ParamSet) -> Vec<String> {
    params.iter().filter(|(_, t)| t.data().iter().any(|v| !v.is_finite())).map(|(n, _)| n.to_string()).collect()
}

/// Writes the diagnostic dump (when there is a run directory) and builds the
/// error that aborts training.
fn abort_non_finite(paths: Option<&RunPaths>, dump: &NanDump) -> Result<Error> {
    let (epoch, step) = (dump.epoch, dump.step);
    Ok(Error::NonFinite(match paths {
        Some(p) => {
            fs::write(p.nan_dump(), serde_json::to_vec_pretty(dump)?)?;
            format!("epoch {epoch} step {step}; diagnostics in {}", p.nan_dump().display())
        }
        None => format!("epoch {epoch} step {step}: {}", serde_json::to_string(dump)?),
    }))
}

/// Output locations under a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn plo_debug(&self) -> PathBuf {
        self.dir.join("plo_debug.jsonl")
    }
    pub fn nan_dump(&self) -> PathBuf {
        self.dir.join("nan_dump.json")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.json"))
    }
}

fn checkpoint_meta(cfg: &RunConfig, num_classes: usize, epoch: usize, role: &str) -> serde_json::Value {
    serde_json::json!({ "run_config": cfg, "num_classes": num_classes, "epoch": epoch, "role": role })
}

/// Trains on a dataset; see [`train_prepared`].
pub fn train(ds: &Dataset, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    train_prepared(&TrainData::prepare(ds, cfg)?, cfg, out_dir)
}

/// Runs the full schedule. With `out_dir`, writes `metrics.jsonl`, the
/// checkpoints (`phase1`, `final`, `teacher`) and, if enabled, PLO debug
/// records. A non-finite loss writes `nan_dump.json` and aborts.
pub fn train_prepared(data: &TrainData, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    let c = data.num_classes;
    let model = cfg.model(c);
    let phase1 = cfg.phase1_epochs();
    if cfg.ablation.pseudo_labels && phase1 < cfg.epochs && data.unlabeled.is_empty() {
        bail!(Config, "dataset has no unlabeled split but the schedule uses one");
    }
    let paths = out_dir.map(|d| RunPaths { dir: d.to_path_buf() });
    let mut metrics_log = None;
    let mut plo_log = None;
    if let Some(p) = &paths {
        fs::create_dir_all(p.dir.join("checkpoints"))?;
        metrics_log = Some(BufWriter::new(File::create(p.metrics())?));
        if cfg.plo_debug {
            plo_log = Some(BufWriter::new(File::create(p.plo_debug())?));
        }
    }

    let mut params = model.init_params(cfg.seed)?;
    let mut ema: Option<EmaState> = None;
    let lambda_c = cfg.effective_lambda_c();
    let steps = cfg.steps_per_epoch.unwrap_or(data.labeled.len());
    let mut labeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    labeled_rng.set_stream(3);
    let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    unlabeled_rng.set_stream(4);
    let mut labeled_order: Vec<usize> = Vec::new();
    let mut unlabeled_order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_eval = None;

    for epoch in 1..=cfg.epochs {
        let uses_unlabeled = cfg.ablation.pseudo_labels && epoch > phase1;
        if uses_unlabeled && ema.is_none() && cfg.ablation.ema {
            ema = Some(EmaState::new(&params, cfg.t_ema)?);
        }
        let mut sum = LossReport::default();
        let (mut kept, mut total) = ((0usize, 0usize), (0usize, 0usize));
        for step in 0..steps {
            if labeled_order.is_empty() {
                labeled_order = (0..data.labeled.len()).collect();
                labeled_order.shuffle(&mut labeled_rng);
            }
            let lab = &data.labeled[labeled_order.pop().unwrap()];
            let (l3, l2, mut paired) = supervised(&model, &params, lab, &lab.labels, &image_targets(lab))?;
            let mut unl_id = None;
            let (mut l3u, mut l2u) = (None, None);
            if uses_unlabeled {
                if unlabeled_order.is_empty() {
                    unlabeled_order = (0..data.unlabeled.len()).collect();
                    unlabeled_order.shuffle(&mut unlabeled_rng);
                }
                let unl = &data.unlabeled[unlabeled_order.pop().unwrap()];
                unl_id = Some(unl.id.as_str());
                let teacher = match &ema {
                    Some(e) => e.teacher.clone(),
                    None => params.detached(),
                };
                let pt = match pseudo_targets(cfg, &model, &teacher, unl) {
                    Err(Error::NonFinite(m)) => {
                        let dump = NanDump { reason: &m, epoch, step, labeled_scene: &lab.id, unlabeled_scene: unl_id, loss: LossReport::default(), non_finite_params: non_finite(&teacher) };
                        return Err(abort_non_finite(paths.as_ref(), &dump)?);
                    }
                    r => r?,
                };
                kept.0 += pt.retained.0;
                kept.1 += pt.retained.1;
                total.0 += pt.points.len();
                total.1 += pt.pixels.len();
                if let Some(w) = &mut plo_log {
                    for d in &pt.dumps {
                        writeln!(w, "{}", serde_json::to_string(&serde_json::json!({ "epoch": epoch, "step": step, "view": d }))?)?;
                    }
                }
                let (a, b, pu) = supervised(&model, &params, unl, &pt.points, &pt.pixels)?;
                l3u = Some(a);
                l2u = Some(b);
                paired = match (paired, pu) {
                    (Some((x3, x2)), Some((y3, y2))) => Some((concat(&[x3, y3], 0)?, concat(&[x2, y2], 0)?)),
                    (x, y) => x.or(y),
                };
            }
            let consistency = paired_consistency(paired.as_ref())?;
            let terms = LossTerms { l3d_labeled: l3, l2d_labeled: l2, l3d_unlabeled: l3u, l2d_unlabeled: l2u, consistency };
            let (loss, report) = total_loss(&terms, lambda_c)?;
            if !report.is_finite() {
                let dump = NanDump { reason: "non-finite loss", epoch, step, labeled_scene: &lab.id, unlabeled_scene: unl_id, loss: report, non_finite_params: non_finite(&params) };
                return Err(abort_non_finite(paths.as_ref(), &dump)?);
            }
            loss.backward()?;
            if let Some(e) = &ema {
                if let Some((name, _)) = e.teacher.iter().find(|(_, t)| t.has_grad() || t.requires_grad()) {
                    bail!(Internal, "gradient reached teacher parameter {name:?}");
                }
            }
            params.ensure_grads();
            params = params.sgd_step(cfg.lr)?;
            let bad = non_finite(&params);
            if !bad.is_empty() {
                let dump = NanDump { reason: "non-finite parameters after the update", epoch, step, labeled_scene: &lab.id, unlabeled_scene: unl_id, loss: report, non_finite_params: bad };
                return Err(abort_non_finite(paths.as_ref(), &dump)?);
            }
            if let Some(e) = &mut ema {
                e.update(&params)?;
            }
            accumulate(&mut sum, &report);
        }

        let val = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let r = evaluate(&model, &params.snapshot(), &data.val)?;
            last_eval = Some(r.clone());
            Some(r)
        } else {
            None
        };
        let share = |k: usize, t: usize| (uses_unlabeled && t > 0).then(|| k as f64 / t as f64);
        let rec = EpochRecord {
            epoch,
            uses_unlabeled,
            steps,
            loss: mean_report(&sum, steps),
            retained_3d: share(kept.0, total.0),
            retained_2d: share(kept.1, total.1),
            val,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}{}",
            rec.loss.total,
            rec.val.as_ref().map_or(String::new(), |v| format!(
                ", val mIoU 3d {:.3} 2d {:.3}",
                v.metrics_3d.metrics.miou, v.metrics_2d.metrics.miou
            ))
        );
        if let Some(w) = &mut metrics_log {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            w.flush()?;
        }
        records.push(rec);
        if let Some(p) = &paths {
            if epoch == phase1 {
                save_checkpoint(&p.checkpoint("phase1"), &params, &checkpoint_meta(cfg, c, epoch, "student"))?;
            }
        }
    }

    if let Some(p) = &paths {
        save_checkpoint(&p.checkpoint("final"), &params, &checkpoint_meta(cfg, c, cfg.epochs, "student"))?;
        if let Some(e) = &ema {
            save_checkpoint(&p.checkpoint("teacher"), &e.teacher, &checkpoint_meta(cfg, c, cfg.epochs, "teacher"))?;
        }
        if let Some(mut w) = plo_log {
            w.flush()?;
        }
    }
    let final_eval = last_eval.expect("last epoch is always validated");
    Ok(TrainResult { records, student: params, teacher: ema.map(|e| e.teacher), final_eval })
}

#[cfg(test)]
mod tests;
