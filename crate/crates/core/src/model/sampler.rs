//! The model bundle and deterministic DDIM generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xvwm_tensor::{Graph, Tensor};

use super::config::ModelConfig;
use super::network::{context_kv, denoise, embed_conditioning, encode_context, CondInput};
use super::params::ModelParams;
use super::patch::{frame_to_patches, patches_to_frame};
use super::schedule::NoiseSchedule;
use crate::dataset::CumAction;
use crate::error::{Result, XvwmError};
use crate::sim::{Frame, ViewId};

/// One generation request; `seed` fixes the initial noise.
#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    pub context: &'a [Frame],
    pub rel_time: f64,
    pub cum_action: CumAction,
    pub output_view: ViewId,
    pub seed: u64,
}

/// Configuration, parameters and noise schedule of one denoiser.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub schedule: NoiseSchedule,
}

/// Raw context patches `[B, L, n, pd]` from per-request frame windows.
pub fn context_tensor(cfg: &ModelConfig, contexts: &[&[Frame]]) -> Result<Tensor<f32>> {
    let (l, n, pd) = (cfg.context_len, cfg.tokens(), cfg.patch_dim());
    let mut data = Vec::with_capacity(contexts.len() * l * n * pd);
    for ctx in contexts {
        if ctx.len() != l {
            return Err(XvwmError::Usage(format!(
                "context needs {l} frames, got {}",
                ctx.len()
            )));
        }
        for f in *ctx {
            data.extend(frame_patches(cfg, f)?);
        }
    }
    Ok(Tensor::new(&[contexts.len(), l, n, pd], data)?)
}

pub fn frame_patches(cfg: &ModelConfig, f: &Frame) -> Result<Vec<f32>> {
    if f.size() != cfg.image_size {
        return Err(XvwmError::Usage(format!(
            "frame is {}x{}, model expects {}",
            f.size(),
            f.size(),
            cfg.image_size
        )));
    }
    frame_to_patches(f, cfg.patch_size)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<f32>) -> Self {
        let schedule = NoiseSchedule::linear(config.diffusion_steps);
        Self {
            config,
            params,
            schedule,
        }
    }

    /// Noise prediction for already-noised targets, without gradients.
    pub fn predict_eps(&self, noisy: Tensor<f32>, context: Tensor<f32>, conds: &[CondInput]) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let out = super::network::forward(&mut g, &self.config, &p, noisy, context, conds)?;
        Ok(g.value(out).clone())
    }

    /// DDIM (η = 0) generation for a batch of requests.
    pub fn sample(&self, reqs: &[SampleRequest<'_>], steps: usize) -> Result<Vec<Frame>> {
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = &self.config;
        let (b, n, pd) = (reqs.len(), cfg.tokens(), cfg.patch_dim());
        for r in reqs {
            cfg.view_row(r.output_view)?;
        }
        let timesteps = self.schedule.ddim_timesteps(steps)?;
        let contexts: Vec<&[Frame]> = reqs.iter().map(|r| r.context).collect();
        let ctx = context_tensor(cfg, &contexts)?;

        // Context keys/values are computed once and reused at every step.
        let kv_cache: Vec<(Tensor<f32>, Tensor<f32>)> = {
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g, false);
            let c = encode_context(&mut g, cfg, &p, ctx)?;
            let kv = context_kv(&mut g, cfg, &p, c)?;
            kv.iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect()
        };

        let mut x = Vec::with_capacity(b * n * pd);
        for r in reqs {
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            x.extend((0..n * pd).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z as f32 }));
        }

        for (i, &t) in timesteps.iter().enumerate() {
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g, false);
            let kv: Vec<_> = kv_cache
                .iter()
                .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
                .collect();
            let conds: Vec<CondInput> = reqs
                .iter()
                .map(|r| CondInput {
                    t_diff: t,
                    rel_time: r.rel_time,
                    cum_action: r.cum_action,
                    output_view: r.output_view,
                })
                .collect();
            let c = embed_conditioning(&mut g, cfg, &p, &conds)?;
            let xv = g.constant(Tensor::new(&[b, n, pd], x.clone())?);
            let eps = denoise(&mut g, cfg, &p, xv, &kv, c)?;
            let eps = g.value(eps).data();
            self.schedule.ddim_step(&mut x, eps, t, timesteps.get(i + 1).copied())?;
        }

        x.chunks(n * pd)
            .map(|tok| patches_to_frame(tok, cfg.image_size, cfg.patch_size))
            .collect()
    }
}
