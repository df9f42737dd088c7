//! Shared inference worker: one thread owns the predictor and serves a
//! FIFO queue of requests from every session.

use std::sync::Arc;
use std::thread;

use tokio::sync::{mpsc, oneshot};
use xvwm_core::dataset::CumAction;
use xvwm_core::eval::{ModelPredictor, PredictionRequest, Predictor, SimulatorOracle};
use xvwm_core::model::Model;
use xvwm_core::sim::{AgentState, Frame, RenderConfig, ViewId, World};

use crate::error::{Result, ServeError};

/// What produces imagined frames.
pub enum Backend {
    Model(Model),
    /// Renders the simulator at the target pose; for demos and tests.
    Oracle(RenderConfig),
}

impl Backend {
    fn views(&self) -> Vec<ViewId> {
        match self {
            Backend::Model(m) => m.config.views.clone(),
            Backend::Oracle(_) => ViewId::ALL.to_vec(),
        }
    }

    fn image_size(&self) -> usize {
        match self {
            Backend::Model(m) => m.config.image_size,
            Backend::Oracle(r) => r.size,
        }
    }
}

/// Owned counterpart of an evaluation prediction request.
#[derive(Clone, Debug)]
pub struct ImagineRequest {
    pub context: Vec<Frame>,
    pub input_view: ViewId,
    pub output_view: ViewId,
    pub rel_time: f64,
    pub cum_action: CumAction,
    /// Pose the oracle renders; the model never sees it.
    pub target_pose: AgentState,
    pub world: Arc<World>,
    pub seed: u64,
}

struct Job {
    reqs: Vec<ImagineRequest>,
    ddim_steps: usize,
    reply: oneshot::Sender<Result<Vec<Frame>>>,
}

/// Cheap handle to the worker thread.
#[derive(Clone)]
pub struct Worker {
    tx: mpsc::UnboundedSender<Job>,
    views: Arc<[ViewId]>,
    image_size: usize,
}

impl Worker {
    pub fn spawn(backend: Backend) -> Self {
        let views: Arc<[ViewId]> = backend.views().into();
        let image_size = backend.image_size();
        let (tx, mut rx) = mpsc::unbounded_channel::<Job>();
        thread::Builder::new()
            .name("xvwm-imagine".into())
            .spawn(move || {
                while let Some(job) = rx.blocking_recv() {
                    let out = run(&backend, &job.reqs, job.ddim_steps);
                    let _ = job.reply.send(out);
                }
            })
            .expect("spawn worker thread");
        Self { tx, views, image_size }
    }

    /// Views the backend can produce.
    pub fn views(&self) -> &[ViewId] {
        &self.views
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Queue a batch and wait for its frames, in request order.
    pub async fn imagine(&self, reqs: Vec<ImagineRequest>, ddim_steps: usize) -> Result<Vec<Frame>> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Job {
                reqs,
                ddim_steps,
                reply,
            })
            .map_err(|_| ServeError::WorkerGone)?;
        rx.await.map_err(|_| ServeError::WorkerGone)?
    }
}

fn run(backend: &Backend, reqs: &[ImagineRequest], ddim_steps: usize) -> Result<Vec<Frame>> {
    let preqs: Vec<PredictionRequest<'_>> = reqs
        .iter()
        .map(|r| PredictionRequest {
            context: &r.context,
            input_view: r.input_view,
            output_view: r.output_view,
            rel_time: r.rel_time,
            cum_action: r.cum_action,
            target_pose: r.target_pose,
            world: &r.world,
            anchor_output: None,
            seed: r.seed,
        })
        .collect();
    let frames = match backend {
        Backend::Model(m) => {
            let mut p = ModelPredictor::new(m, ddim_steps);
            p.batch = preqs.len().max(1);
            p.predict(&preqs)?
        }
        Backend::Oracle(render) => SimulatorOracle { render: render.clone() }.predict(&preqs)?,
    };
    Ok(frames)
}
