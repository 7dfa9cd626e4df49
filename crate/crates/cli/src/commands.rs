//! The four subcommands, as library functions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use pixclust_core::eval::{cityscapes_ap, lane_score_many, EvalImage, GtInstance};
use pixclust_core::losses::LossBreakdown;
use pixclust_core::mask::Mask;
use pixclust_core::network::{forward, grad_check, train, GradCheckReport, NetworkOutputs, ParameterStore, TrainOutcome};
use pixclust_core::postprocess::{ground_truth_outputs, predict_instances, predict_lanes, score_confidence};
use pixclust_core::scene::Scene;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, SceneMode};
use crate::dataset::{self, Manifest};
use crate::error::{CliError, IoContext, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.pxc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Ap,
    Lane,
}

/// Where the evaluated outputs come from.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Network(&'a ParameterStore),
    /// Ground truth rendered as perfect outputs.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene: usize,
    pub category: u8,
    pub confidence: f64,
    /// Flat `[start, len, ...]` runs of row-major pixel indices.
    pub rle: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneReport {
    pub accuracy: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub ap_mean: Option<f64>,
    pub ap_per_category: BTreeMap<u8, f64>,
    pub ap50: Option<f64>,
    pub lane: Option<LaneReport>,
}

fn write_json_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).at(path)
}

fn check_dims(cfg: &RunConfig, m: &Manifest) -> Result<()> {
    if (m.height, m.width) != (cfg.net.height, cfg.net.width) {
        return Err(CliError::Invalid(format!(
            "dataset scenes are {}x{} but the network expects {}x{}",
            m.height, m.width, cfg.net.height, cfg.net.width
        )));
    }
    Ok(())
}

/// Generates `cfg.count` scenes into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let scenes = dataset::generate(cfg, cfg.seed, cfg.count)?;
    let manifest = Manifest {
        count: scenes.len(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        mode: cfg.mode,
        height: cfg.scene.height,
        width: cfg.scene.width,
        scene_seeds: scenes.iter().map(|s| s.seed).collect(),
    };
    dataset::write_dataset(out, &manifest, &scenes)?;
    Ok(manifest)
}

/// Trains on the dataset in `data`, writing a checkpoint and per-step
/// metrics into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, scenes) = dataset::read_dataset(data)?;
    check_dims(cfg, &manifest)?;
    fs::create_dir_all(out).at(out)?;
    let outcome = train(&cfg.train_config(), &scenes, cfg.train.steps, |_| {})?;
    write_json_lines(&out.join(METRICS_FILE), &outcome.log)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    fs::write(&ckpt, checkpoint::encode(&outcome.params)).at(&ckpt)?;
    Ok(outcome)
}

pub fn final_breakdown(outcome: &TrainOutcome) -> Option<LossBreakdown> {
    outcome.log.last().map(|r| r.breakdown)
}

fn outputs_for(cfg: &RunConfig, scene: &Scene, source: Source<'_>) -> Result<NetworkOutputs> {
    Ok(match source {
        Source::Network(params) => forward(&cfg.net(), params, &scene.image)?.outputs,
        Source::GroundTruth => ground_truth_outputs(scene, cfg.net.classes)?,
    })
}

/// Lane masks of a scene's ground truth, one per instance ID.
pub fn gt_lanes(scene: &Scene) -> Vec<Mask> {
    (1..=scene.instance_count() as u16).map(|id| Mask::from_grid(&scene.instances, |&v| v == id)).collect()
}

/// Predictions and the aggregate report over `scenes`, in scene order.
pub fn evaluate(cfg: &RunConfig, scenes: &[Scene], source: Source<'_>, mode: EvalMode) -> Result<(Vec<PredictionRecord>, Report)> {
    let mut pp = cfg.postprocess();
    if let Source::GroundTruth = source {
        pp.stride = 1;
        pp.allow_cross_color_merge = false;
    }
    let mut records = Vec::new();
    let mut report = Report { ap_mean: None, ap_per_category: BTreeMap::new(), ap50: None, lane: None };
    match mode {
        EvalMode::Ap => {
            let mut images = Vec::with_capacity(scenes.len());
            for (i, scene) in scenes.iter().enumerate() {
                let preds = predict_instances(&outputs_for(cfg, scene, source)?, &pp)?;
                records.extend(preds.iter().map(|p| PredictionRecord {
                    scene: i,
                    category: p.category,
                    confidence: p.confidence,
                    rle: p.mask.to_flat_runs(),
                }));
                images.push(EvalImage { preds, gts: GtInstance::from_label_maps(&scene.instances, &scene.semantics) });
            }
            let ap = cityscapes_ap(&images)?;
            report.ap_mean = ap.ap_mean;
            report.ap_per_category = ap.ap_per_category;
            report.ap50 = ap.ap50;
        }
        EvalMode::Lane => {
            let mut pairs = Vec::with_capacity(scenes.len());
            for (i, scene) in scenes.iter().enumerate() {
                let lanes = predict_lanes(&outputs_for(cfg, scene, source)?, &pp)?;
                records.extend(lanes.iter().map(|m| PredictionRecord {
                    scene: i,
                    category: 1,
                    confidence: score_confidence(m.area(), pp.size_threshold),
                    rle: m.to_flat_runs(),
                }));
                pairs.push((lanes, gt_lanes(scene)));
            }
            if !pairs.is_empty() {
                let s = lane_score_many(&pairs, &cfg.lane_eval)?;
                report.lane = Some(LaneReport { accuracy: s.accuracy, fp: s.fp_rate, fn_: s.fn_rate });
            }
        }
    }
    Ok((records, report))
}

/// Runs inference on `data` and writes predictions and a report into
/// `out`. Without a checkpoint the ground truth is evaluated instead.
pub fn cmd_infer_eval(cfg: &RunConfig, ckpt: Option<&Path>, data: &Path, mode: EvalMode, out: &Path) -> Result<Report> {
    cfg.validate()?;
    let (manifest, scenes) = dataset::read_dataset(data)?;
    check_dims(cfg, &manifest)?;
    if mode == EvalMode::Lane && manifest.mode != SceneMode::Lanes {
        return Err(CliError::Invalid(format!(
            "category mismatch: lane evaluation needs a lane dataset, {} holds {:?} scenes",
            data.display(),
            manifest.mode
        )));
    }
    let params = match ckpt {
        Some(path) => {
            let p = checkpoint::decode(&fs::read(path).at(path)?)?;
            p.check_against(&cfg.net())
                .map_err(|e| CliError::Invalid(format!("checkpoint {} does not fit the config: {e}", path.display())))?;
            Some(p)
        }
        None => None,
    };
    let source = params.as_ref().map_or(Source::GroundTruth, Source::Network);
    let (records, report) = evaluate(cfg, &scenes, source, mode)?;
    fs::create_dir_all(out).at(out)?;
    write_json_lines(&out.join(PREDICTIONS_FILE), &records)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    let path = out.join(REPORT_FILE);
    fs::write(&path, json).at(&path)?;
    Ok(report)
}

/// Gradient check on the config's network; fails above `tolerance`.
pub fn cmd_grad_check(cfg: &RunConfig, tolerance: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let report = grad_check(&cfg.grad_check_config())?;
    if report.max_rel_error > tolerance {
        return Err(CliError::GradCheck(report.max_rel_error));
    }
    Ok(report)
}

/// Writes a single line to stdout; broken pipes are ignored.
pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    Ok(())
}
