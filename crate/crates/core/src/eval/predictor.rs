//! Frame predictors scored by the evaluation protocols: the learned model,
//! the simulator as an oracle, and reference baselines.

use crate::dataset::CumAction;
use crate::error::{Result, XvwmError};
use crate::model::{Model, SampleRequest};
use crate::sim::{render, AgentState, Frame, RenderConfig, ViewId, World};

/// Everything a predictor may look at for one target.
#[derive(Clone, Debug)]
pub struct PredictionRequest<'a> {
    pub context: &'a [Frame],
    pub input_view: ViewId,
    pub output_view: ViewId,
    pub rel_time: f64,
    pub cum_action: CumAction,
    /// True pose at the target time; only the oracle reads it.
    pub target_pose: AgentState,
    /// Arena with the episode's sky; only the oracle reads it.
    pub world: &'a World,
    /// Output-view frame at the anchor time, for copy baselines.
    pub anchor_output: Option<&'a Frame>,
    pub seed: u64,
}

pub trait Predictor {
    fn name(&self) -> String;

    /// Views this predictor can consume and produce; `None` means any.
    fn views(&self) -> Option<&[ViewId]> {
        None
    }

    fn predict(&self, reqs: &[PredictionRequest<'_>]) -> Result<Vec<Frame>>;
}

/// Fail with a configuration error unless every view is supported.
pub fn require_views(p: &dyn Predictor, views: &[ViewId]) -> Result<()> {
    if let Some(have) = p.views() {
        for v in views {
            if !have.contains(v) {
                return Err(XvwmError::Config(format!(
                    "predictor {} does not cover view {v} (has {})",
                    p.name(),
                    have.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
    }
    Ok(())
}

/// DDIM samples from a trained model, in fixed-size batches.
pub struct ModelPredictor<'m> {
    pub model: &'m Model,
    pub ddim_steps: usize,
    pub batch: usize,
    pub label: String,
}

impl<'m> ModelPredictor<'m> {
    pub fn new(model: &'m Model, ddim_steps: usize) -> Self {
        Self {
            model,
            ddim_steps,
            batch: 8,
            label: "model".into(),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn views(&self) -> Option<&[ViewId]> {
        Some(&self.model.config.views)
    }

    fn predict(&self, reqs: &[PredictionRequest<'_>]) -> Result<Vec<Frame>> {
        let mut out = Vec::with_capacity(reqs.len());
        for chunk in reqs.chunks(self.batch.max(1)) {
            let sreqs: Vec<SampleRequest<'_>> = chunk
                .iter()
                .map(|r| SampleRequest {
                    context: r.context,
                    rel_time: r.rel_time,
                    cum_action: r.cum_action,
                    output_view: r.output_view,
                    seed: r.seed,
                })
                .collect();
            out.extend(self.model.sample(&sreqs, self.ddim_steps)?);
        }
        Ok(out)
    }
}

/// Renders the true target; an upper bound for every protocol.
pub struct SimulatorOracle {
    pub render: RenderConfig,
}

impl Predictor for SimulatorOracle {
    fn name(&self) -> String {
        "simulator-oracle".into()
    }

    fn predict(&self, reqs: &[PredictionRequest<'_>]) -> Result<Vec<Frame>> {
        Ok(reqs
            .iter()
            .map(|r| render(r.world, &r.target_pose, r.output_view, &self.render))
            .collect())
    }
}

/// Repeats the output view as it was at the anchor time.
pub struct CopyAnchorOutput;

impl Predictor for CopyAnchorOutput {
    fn name(&self) -> String {
        "copy-last-output-view".into()
    }

    fn predict(&self, reqs: &[PredictionRequest<'_>]) -> Result<Vec<Frame>> {
        reqs.iter()
            .map(|r| {
                r.anchor_output.cloned().ok_or_else(|| {
                    XvwmError::Usage(format!("no {} frame at the anchor to copy", r.output_view))
                })
            })
            .collect()
    }
}

/// Repeats the newest context frame, whatever its view.
pub struct CopyLastContext;

impl Predictor for CopyLastContext {
    fn name(&self) -> String {
        "copy-last-context".into()
    }

    fn predict(&self, reqs: &[PredictionRequest<'_>]) -> Result<Vec<Frame>> {
        reqs.iter()
            .map(|r| {
                r.context
                    .last()
                    .cloned()
                    .ok_or_else(|| XvwmError::Usage("empty context".into()))
            })
            .collect()
    }
}

/// Mid-gray everywhere.
pub struct ConstantGray;

impl Predictor for ConstantGray {
    fn name(&self) -> String {
        "constant-gray".into()
    }

    fn predict(&self, reqs: &[PredictionRequest<'_>]) -> Result<Vec<Frame>> {
        reqs.iter()
            .map(|r| {
                let size = r
                    .context
                    .first()
                    .map(|f| f.size())
                    .ok_or_else(|| XvwmError::Usage("empty context".into()))?;
                Ok(Frame::filled(size, [128, 128, 128]))
            })
            .collect()
    }
}
