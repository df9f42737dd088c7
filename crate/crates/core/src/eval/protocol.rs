//! Localization, trajectory, spawn, view-pair matrix and transfer protocols.

use serde::{Deserialize, Serialize};

use super::marker::{angular_error, detect_marker};
use super::metrics::{bootstrap_ci, mean, median, pixel_metrics, Interval, PixelMetrics};
use super::predictor::{require_views, PredictionRequest, Predictor};
use crate::dataset::{make_sample, Episode, CONTEXT_LEN};
use crate::error::{Result, XvwmError};
use crate::sim::{project_to_bev, render, Frame, RenderConfig, ViewId, World, NUM_SKIES};
use crate::training::Exposure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Prediction horizon in frames.
    pub horizon: usize,
    pub anchors_per_episode: usize,
    pub ddim_steps: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            horizon: 20,
            anchors_per_episode: 3,
            ddim_steps: 20,
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.anchors_per_episode == 0 || self.ddim_steps == 0 {
            return Err(XvwmError::Config(
                "eval.horizon, eval.anchors_per_episode and eval.ddim_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Evenly spaced anchors whose context and `t + horizon` fit in `len` frames.
    pub fn anchors(&self, len: usize, horizon: usize) -> Result<Vec<usize>> {
        let lo = CONTEXT_LEN - 1;
        if len < lo + horizon + 1 {
            return Err(XvwmError::Config(format!(
                "episode of {len} frames cannot hold a {CONTEXT_LEN}-frame context and a {horizon}-frame horizon"
            )));
        }
        let hi = len - 1 - horizon;
        let n = self.anchors_per_episode;
        if hi + 1 - lo < n {
            return Err(XvwmError::Config(format!(
                "episode of {len} frames has fewer than {n} distinct anchors"
            )));
        }
        Ok(if n == 1 {
            vec![(lo + hi) / 2]
        } else {
            (0..n)
                .map(|i| lo + ((hi - lo) as f64 * i as f64 / (n - 1) as f64).round() as usize)
                .collect()
        })
    }
}

/// Held-out episodes and the scene they were rendered from.
pub struct TestSet {
    pub episodes: Vec<Episode>,
    pub world: World,
    pub render: RenderConfig,
}

impl TestSet {
    pub fn world_for(&self, ep: &Episode) -> World {
        self.world.with_sky(ep.sky_id)
    }

    pub fn size(&self) -> usize {
        self.render.size
    }
}

/// Success thresholds in pixels: 5 and 10 px at 224 px, scaled and rounded
/// to the nearest half pixel.
pub fn success_thresholds(size: usize) -> (f64, f64) {
    let scale = |px: f64| (px * size as f64 / 224.0 * 2.0).round() / 2.0;
    (scale(5.0), scale(10.0))
}

fn request_seed(base: u64, episode: u64, t: usize, iv: ViewId, ov: ViewId) -> u64 {
    let mut z = base ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((t as u64) << 8) ^ ((iv.code() as u64) << 4)
        ^ ov.code() as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One evaluation target with everything needed to build a request.
struct Target<'e> {
    ep: &'e Episode,
    world: World,
    t: usize,
    k: i64,
    iv: ViewId,
    ov: ViewId,
}

fn predict_targets(pred: &dyn Predictor, targets: &[Target<'_>], seed: u64) -> Result<Vec<Frame>> {
    let samples = targets
        .iter()
        .map(|tg| make_sample(tg.ep, tg.t, tg.iv, tg.ov, tg.k))
        .collect::<Result<Vec<_>>>()?;
    let reqs: Vec<PredictionRequest<'_>> = targets
        .iter()
        .zip(&samples)
        .map(|(tg, s)| {
            Ok(PredictionRequest {
                context: &s.context,
                input_view: tg.iv,
                output_view: tg.ov,
                rel_time: s.rel_time,
                cum_action: s.cum_action,
                target_pose: tg.ep.poses[(tg.t as i64 + tg.k) as usize],
                world: &tg.world,
                anchor_output: tg.ep.frames_of(tg.ov).ok().map(|f| &f[tg.t]),
                seed: request_seed(seed, tg.ep.id, tg.t, tg.iv, tg.ov),
            })
        })
        .collect::<Result<_>>()?;
    let out = pred.predict(&reqs)?;
    if out.len() != reqs.len() {
        return Err(XvwmError::Usage(format!(
            "predictor {} returned {} frames for {} requests",
            pred.name(),
            out.len(),
            reqs.len()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub predictor: String,
    pub input_view: ViewId,
    pub samples: usize,
    pub invalid: usize,
    /// Median over valid detections only.
    pub median_valid_px: f64,
    /// Median with failed detections counted as infinitely wrong.
    pub median_all_px: f64,
    pub median_ci: Interval,
    pub success_a: f64,
    pub success_b: f64,
    pub median_orientation_error_deg: f64,
    /// Per-sample error; `None` for a failed detection.
    pub errors: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub size: usize,
    pub horizon: usize,
    pub threshold_a_px: f64,
    pub threshold_b_px: f64,
    pub rows: Vec<LocalizationRow>,
}

/// Predict the top-down view `horizon` frames ahead from each input view and
/// score the detected marker against the true projected position.
pub fn localization_eval(
    pred: &dyn Predictor,
    test: &TestSet,
    protocol: &EvalProtocol,
    input_views: &[ViewId],
) -> Result<LocalizationReport> {
    protocol.validate()?;
    let mut needed = input_views.to_vec();
    needed.push(ViewId::Bev);
    require_views(pred, &needed)?;
    let (a, b) = success_thresholds(test.size());
    let mut rows = Vec::new();
    for &iv in input_views {
        let mut targets = Vec::new();
        for ep in &test.episodes {
            for t in protocol.anchors(ep.len(), protocol.horizon)? {
                targets.push(Target {
                    ep,
                    world: test.world_for(ep),
                    t,
                    k: protocol.horizon as i64,
                    iv,
                    ov: ViewId::Bev,
                });
            }
        }
        let frames = predict_targets(pred, &targets, protocol.seed)?;
        let mut errors = Vec::with_capacity(frames.len());
        let mut orient = Vec::new();
        for (tg, f) in targets.iter().zip(&frames) {
            let pose = tg.ep.poses[tg.t + protocol.horizon];
            let (u, v) = project_to_bev(&tg.world, &test.render, pose.x, pose.y)?;
            let d = detect_marker(f);
            if d.valid {
                errors.push(Some(d.distance_to(u, v)));
                orient.push(angular_error(d.orientation, pose.yaw).to_degrees());
            } else {
                errors.push(None);
            }
        }
        rows.push(localization_row(pred.name(), iv, errors, orient, a, b, protocol));
    }
    Ok(LocalizationReport {
        size: test.size(),
        horizon: protocol.horizon,
        threshold_a_px: a,
        threshold_b_px: b,
        rows,
    })
}

fn localization_row(
    predictor: String,
    input_view: ViewId,
    errors: Vec<Option<f64>>,
    orient: Vec<f64>,
    a: f64,
    b: f64,
    protocol: &EvalProtocol,
) -> LocalizationRow {
    let valid: Vec<f64> = errors.iter().flatten().copied().collect();
    let all: Vec<f64> = errors.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
    let n = errors.len().max(1) as f64;
    let hits = |thr: f64| valid.iter().filter(|&&e| e < thr).count() as f64 / n;
    LocalizationRow {
        predictor,
        input_view,
        samples: errors.len(),
        invalid: errors.len() - valid.len(),
        median_valid_px: median(&valid),
        median_all_px: median(&all),
        median_ci: bootstrap_ci(&valid, median, protocol.bootstrap_resamples, protocol.seed),
        success_a: hits(a),
        success_b: hits(b),
        median_orientation_error_deg: median(&orient),
        errors,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub time_s: f64,
    pub truth_px: (f64, f64),
    /// `None` when the marker could not be detected.
    pub predicted_px: Option<(f64, f64)>,
    pub error_px: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    pub predictor: String,
    pub episode: u64,
    pub steps: Vec<TraceStep>,
    pub mean_px: f64,
    pub median_px: f64,
    pub max_px: f64,
    pub invalid: usize,
}

/// Slide a 4-frame ego window over the episode and imagine the top-down
/// view one frame ahead at every `stride`-th step.
pub fn trajectory_eval(
    pred: &dyn Predictor,
    test: &TestSet,
    ep: &Episode,
    stride: usize,
    seed: u64,
) -> Result<TrajectoryTrace> {
    require_views(pred, &[ViewId::Ego, ViewId::Bev])?;
    if ep.len() < CONTEXT_LEN + 1 {
        return Err(XvwmError::Config(format!(
            "trajectory needs at least {} frames, episode has {}",
            CONTEXT_LEN + 1,
            ep.len()
        )));
    }
    let world = test.world_for(ep);
    let targets: Vec<Target<'_>> = (CONTEXT_LEN - 1..ep.len() - 1)
        .step_by(stride.max(1))
        .map(|t| Target {
            ep,
            world: world.clone(),
            t,
            k: 1,
            iv: ViewId::Ego,
            ov: ViewId::Bev,
        })
        .collect();
    let frames = predict_targets(pred, &targets, seed)?;
    let mut steps = Vec::with_capacity(frames.len());
    for (tg, f) in targets.iter().zip(&frames) {
        let pose = ep.poses[tg.t + 1];
        let truth = project_to_bev(&world, &test.render, pose.x, pose.y)?;
        let d = detect_marker(f);
        steps.push(TraceStep {
            time_s: (tg.t + 1) as f64 / ep.fps(),
            truth_px: truth,
            predicted_px: d.valid.then_some(d.centroid),
            error_px: d.valid.then(|| d.distance_to(truth.0, truth.1)),
        });
    }
    let errs: Vec<f64> = steps.iter().filter_map(|s| s.error_px).collect();
    Ok(TrajectoryTrace {
        predictor: pred.name(),
        episode: ep.id,
        mean_px: mean(&errs),
        median_px: median(&errs),
        max_px: errs.iter().copied().fold(f64::NAN, f64::max),
        invalid: steps.len() - errs.len(),
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci: Interval,
    pub std: f64,
}

impl MetricSummary {
    pub fn of(xs: &[f64], protocol: &EvalProtocol) -> Self {
        let m = mean(xs);
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        } else {
            0.0
        };
        Self {
            mean: m,
            ci: bootstrap_ci(xs, mean, protocol.bootstrap_resamples, protocol.seed),
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSummary {
    pub samples: usize,
    pub mse: MetricSummary,
    pub psnr: MetricSummary,
    pub ssim: MetricSummary,
}

impl PixelSummary {
    fn of(ms: &[PixelMetrics], protocol: &EvalProtocol) -> Self {
        let col = |f: fn(&PixelMetrics) -> f64| ms.iter().map(f).collect::<Vec<_>>();
        Self {
            samples: ms.len(),
            mse: MetricSummary::of(&col(|m| m.mse), protocol),
            psnr: MetricSummary::of(&col(|m| m.psnr), protocol),
            ssim: MetricSummary::of(&col(|m| m.ssim), protocol),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpawnRow {
    pub predictor: String,
    /// Against the ground truth rendered with the episode's own sky.
    pub exact_sky: PixelSummary,
    /// Against the best-matching sky palette, per metric.
    pub sky_agnostic: PixelSummary,
    pub per_sample_exact: Vec<PixelMetrics>,
    pub per_sample_agnostic: Vec<PixelMetrics>,
}

/// Generate the egocentric view one frame ahead from four top-down frames.
pub fn spawn_eval(pred: &dyn Predictor, test: &TestSet, protocol: &EvalProtocol) -> Result<SpawnRow> {
    protocol.validate()?;
    require_views(pred, &[ViewId::Ego, ViewId::Bev])?;
    let mut targets = Vec::new();
    for ep in &test.episodes {
        for t in protocol.anchors(ep.len(), 1)? {
            targets.push(Target {
                ep,
                world: test.world_for(ep),
                t,
                k: 1,
                iv: ViewId::Bev,
                ov: ViewId::Ego,
            });
        }
    }
    let frames = predict_targets(pred, &targets, protocol.seed)?;
    let mut exact = Vec::with_capacity(frames.len());
    let mut agnostic = Vec::with_capacity(frames.len());
    for (tg, f) in targets.iter().zip(&frames) {
        let pose = tg.ep.poses[tg.t + 1];
        let gt = render(&tg.world, &pose, ViewId::Ego, &test.render);
        let m = pixel_metrics(f, &gt)?;
        let mut best = m;
        for sky in 0..NUM_SKIES as u8 {
            let alt = render(&tg.world.with_sky(sky), &pose, ViewId::Ego, &test.render);
            best = best.best(pixel_metrics(f, &alt)?);
        }
        exact.push(m);
        agnostic.push(best);
    }
    Ok(SpawnRow {
        predictor: pred.name(),
        exact_sky: PixelSummary::of(&exact, protocol),
        sky_agnostic: PixelSummary::of(&agnostic, protocol),
        per_sample_exact: exact,
        per_sample_agnostic: agnostic,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub input_view: ViewId,
    pub output_view: ViewId,
    pub metrics: PixelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub predictor: String,
    pub views: Vec<ViewId>,
    pub horizon: usize,
    pub cells: Vec<MatrixCell>,
}

impl MatrixReport {
    pub fn cell(&self, input: ViewId, output: ViewId) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.input_view == input && c.output_view == output)
    }
}

/// Pixel metrics for every (input, output) pair of `views` at the horizon.
pub fn metric_matrix(
    pred: &dyn Predictor,
    test: &TestSet,
    protocol: &EvalProtocol,
    views: &[ViewId],
) -> Result<MatrixReport> {
    protocol.validate()?;
    require_views(pred, views)?;
    let mut cells = Vec::with_capacity(views.len() * views.len());
    for &iv in views {
        for &ov in views {
            let mut targets = Vec::new();
            for ep in &test.episodes {
                for t in protocol.anchors(ep.len(), protocol.horizon)? {
                    targets.push(Target {
                        ep,
                        world: test.world_for(ep),
                        t,
                        k: protocol.horizon as i64,
                        iv,
                        ov,
                    });
                }
            }
            let frames = predict_targets(pred, &targets, protocol.seed)?;
            let ms = targets
                .iter()
                .zip(&frames)
                .map(|(tg, f)| pixel_metrics(f, tg.ep.frame(ov, tg.t + protocol.horizon)?))
                .collect::<Result<Vec<_>>>()?;
            cells.push(MatrixCell {
                input_view: iv,
                output_view: ov,
                metrics: PixelSummary::of(&ms, protocol),
            });
        }
    }
    Ok(MatrixReport {
        predictor: pred.name(),
        views: views.to_vec(),
        horizon: protocol.horizon,
        cells,
    })
}

/// One checkpoint in an exposure-matched comparison.
pub struct TransferEntry<'p> {
    pub label: String,
    pub scheme: String,
    pub step: u64,
    pub exposure: Exposure,
    /// Frame size the predictor produces.
    pub image_size: usize,
    pub predictor: &'p dyn Predictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub label: String,
    pub scheme: String,
    pub step: u64,
    pub total_samples: u64,
    pub ego_ego_exposure: u64,
    pub ego_ego_share: f64,
    pub metrics: PixelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub horizon: usize,
    pub rows: Vec<TransferRow>,
}

/// Ego→ego quality of each checkpoint against its ego→ego exposure.
pub fn transfer_study(entries: &[TransferEntry<'_>], test: &TestSet, protocol: &EvalProtocol) -> Result<TransferReport> {
    protocol.validate()?;
    for e in entries {
        if e.image_size != test.size() {
            return Err(XvwmError::Config(format!(
                "checkpoint {} produces {} px frames, test set is {} px",
                e.label,
                e.image_size,
                test.size()
            )));
        }
    }
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let cell = metric_matrix(e.predictor, test, protocol, &[ViewId::Ego])?;
        rows.push(TransferRow {
            label: e.label.clone(),
            scheme: e.scheme.clone(),
            step: e.step,
            total_samples: e.exposure.total(),
            ego_ego_exposure: e.exposure.get(ViewId::Ego, ViewId::Ego),
            ego_ego_share: e.exposure.fraction(ViewId::Ego, ViewId::Ego),
            metrics: cell.cells[0].metrics.clone(),
        });
    }
    Ok(TransferReport {
        horizon: protocol.horizon,
        rows,
    })
}
