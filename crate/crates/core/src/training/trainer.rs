//! AdamW training loop over episodes or a fixed sample set.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use xvwm_tensor::{AdamW, AdamWConfig, Graph, Tensor};

use super::scheme::{sample_time_offset, sample_view_pair, Exposure, Scheme, SchemeConfig};
use crate::dataset::{make_sample, Episode, TrainingSample, CONTEXT_LEN};
use crate::error::{Result, XvwmError};
use crate::model::{
    context_tensor, eps_loss, frame_patches, save_checkpoint, Checkpoint, CondInput, ModelConfig, ModelParams,
    NoiseSchedule, RngState, TrainState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Passes over the anchor set; ignored when `max_steps` is set.
    pub epochs: f64,
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Linear ramp length in steps; 0 disables warmup.
    pub warmup_steps: u64,
    /// Cosine decay to zero over this many steps after warmup; 0 keeps the rate constant.
    pub decay_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 1.0,
            max_steps: None,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup_steps: 0,
            decay_steps: 0,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(XvwmError::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.epochs >= 0.0) {
            return Err(XvwmError::Config("train.lr must be positive and train.epochs non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(XvwmError::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(XvwmError::Config("train.log_every must be positive".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps == 0 {
            return self.lr;
        }
        let frac = ((step - self.warmup_steps) as f64 / self.decay_steps as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Total steps for a corpus with `anchors` valid anchors.
    pub fn total_steps(&self, anchors: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * anchors as f64 / self.batch_size as f64).ceil() as u64)
    }
}

/// Where a sample came from, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub episode: u64,
    pub t: usize,
    pub k: i64,
}

/// Uniform draws over `(episode, t)` anchors with a full context window.
#[derive(Clone, Debug)]
pub struct AnchorIndex {
    anchors: Vec<(u32, u32)>,
}

impl AnchorIndex {
    pub fn new(episodes: &[Episode]) -> Result<Self> {
        let anchors: Vec<(u32, u32)> = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (CONTEXT_LEN - 1..ep.len()).map(move |t| (e as u32, t as u32)))
            .collect();
        if anchors.is_empty() {
            return Err(XvwmError::Startup("no episode is long enough to train on".into()));
        }
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// One JSON line of the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub samples: u64,
    pub exposure: serde_json::Map<String, serde_json::Value>,
    pub wall_time_s: f64,
}

pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Open for appending so resumed runs extend the same log.
    pub fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("metrics serialize");
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<MetricsRecord>> {
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| XvwmError::format("metrics", format!("bad record: {e}")))
            })
            .collect()
    }
}

/// Mutable training state: parameters, optimizer, RNG and counters.
pub struct Trainer {
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub exposure: Exposure,
    schedule: NoiseSchedule,
}

fn check_views(model: &ModelConfig, scheme: &SchemeConfig) -> Result<()> {
    for v in scheme.views() {
        if !model.views.contains(v) {
            return Err(XvwmError::Config(format!(
                "scheme {} uses view {v}, missing from model.views",
                scheme.scheme
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(model: ModelConfig, scheme: SchemeConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        scheme.validate()?;
        train.validate()?;
        check_views(&model, &scheme)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let params = ModelParams::init(&model, &mut rng);
        let opt = AdamW::new(train.adamw(), &params.tensors);
        let schedule = NoiseSchedule::linear(model.diffusion_steps);
        Ok(Self {
            model,
            scheme,
            train,
            params,
            opt,
            rng,
            step: 0,
            exposure: Exposure::default(),
            schedule,
        })
    }

    /// Continue from a checkpoint that carries training state.
    pub fn resume(ck: Checkpoint, scheme: SchemeConfig, train: TrainConfig) -> Result<Self> {
        scheme.validate()?;
        train.validate()?;
        check_views(&ck.config, &scheme)?;
        let ts = ck
            .train
            .ok_or_else(|| XvwmError::Config("checkpoint has no training state to resume from".into()))?;
        if ts.scheme != scheme.scheme.code() {
            let saved = Scheme::from_code(ts.scheme).map_or("unknown".to_string(), |s| s.to_string());
            return Err(XvwmError::Config(format!(
                "checkpoint was trained with scheme {saved}, config asks for {}",
                scheme.scheme
            )));
        }
        let mut rng = ChaCha8Rng::from_seed(ts.rng.seed);
        rng.set_stream(ts.rng.stream);
        rng.set_word_pos(ts.rng.word_pos);
        let mut opt = ts.optimizer;
        opt.config = train.adamw();
        let schedule = NoiseSchedule::linear(ck.config.diffusion_steps);
        Ok(Self {
            model: ck.config,
            scheme,
            train,
            params: ck.params,
            opt,
            rng,
            step: ck.step,
            exposure: Exposure(ts.exposure),
            schedule,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            step: self.step,
            params: self.params.clone(),
            train: Some(TrainState {
                scheme: self.scheme.scheme.code(),
                optimizer: self.opt.clone(),
                rng: RngState {
                    seed: self.rng.get_seed(),
                    stream: self.rng.get_stream(),
                    word_pos: self.rng.get_word_pos(),
                },
                exposure: self.exposure.0,
            }),
        }
    }

    /// Draw one batch: view pair first, then anchor and offset jointly until
    /// the target lies inside the episode.
    pub fn draw_batch(&mut self, episodes: &[Episode], index: &AnchorIndex) -> Result<Vec<(SampleRef, TrainingSample)>> {
        let mut batch = Vec::with_capacity(self.train.batch_size);
        for _ in 0..self.train.batch_size {
            let (iv, ov) = sample_view_pair(&self.scheme, &mut self.rng);
            let mut tries = 0u32;
            let (e, t, k) = loop {
                let (e, t) = index.anchors[self.rng.gen_range(0..index.len())];
                let k = sample_time_offset(&self.scheme, iv != ov, &mut self.rng);
                let target = t as i64 + k;
                if target >= 0 && target < episodes[e as usize].len() as i64 {
                    break (e as usize, t as usize, k);
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(XvwmError::Startup(
                        "episodes too short for the training horizon".into(),
                    ));
                }
            };
            let ep = &episodes[e];
            batch.push((SampleRef { episode: ep.id, t, k }, make_sample(ep, t, iv, ov, k)?));
        }
        Ok(batch)
    }

    /// One optimizer step on `samples`; returns the batch loss.
    pub fn step_on(&mut self, samples: &[TrainingSample], refs: Option<&[SampleRef]>) -> Result<f32> {
        let cfg = &self.model;
        let (n, pd) = (cfg.tokens(), cfg.patch_dim());
        let b = samples.len();
        let contexts: Vec<&[_]> = samples.iter().map(|s| s.context.as_slice()).collect();
        let ctx = context_tensor(cfg, &contexts)?;
        let mut noisy = Vec::with_capacity(b * n * pd);
        let mut eps = Vec::with_capacity(b * n * pd);
        let mut conds = Vec::with_capacity(b);
        for s in samples {
            let t_diff = self.rng.gen_range(0..cfg.diffusion_steps);
            let e: Vec<f32> = (0..n * pd)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z as f32
                })
                .collect();
            noisy.extend(self.schedule.q_sample(&frame_patches(cfg, &s.target)?, t_diff, &e)?);
            eps.extend(e);
            conds.push(CondInput {
                t_diff,
                rel_time: s.rel_time,
                cum_action: s.cum_action,
                output_view: s.output_view,
            });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let loss = eps_loss(
            &mut g,
            cfg,
            &p,
            Tensor::new(&[b, n, pd], noisy)?,
            ctx,
            &conds,
            Tensor::new(&[b, n, pd], eps)?,
        )?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(XvwmError::NonFiniteLoss {
                step: self.step,
                batch: describe_batch(samples, refs, &conds),
            });
        }
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = p
            .vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
            .collect();
        let lr = self.train.lr_at(self.step);
        self.opt.step_with_lr(&mut self.params.tensors, &gs, lr)?;
        for s in samples {
            self.exposure.record(s.input_view, s.output_view);
        }
        self.step += 1;
        Ok(value)
    }
}

fn describe_batch(samples: &[TrainingSample], refs: Option<&[SampleRef]>, conds: &[CondInput]) -> String {
    samples
        .iter()
        .zip(conds)
        .enumerate()
        .map(|(i, (s, c))| {
            let ep = refs.map_or("?".to_string(), |r| r[i].episode.to_string());
            format!(
                "[episode {ep} t={} k={} {}->{} t_diff={}]",
                s.t, s.k, s.input_view, s.output_view, c.t_diff
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Training data: episodes sampled by the scheme, or a fixed batch reused at
/// every step.
pub enum Source<'a> {
    Episodes(&'a [Episode]),
    Fixed(&'a [TrainingSample]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:07}.xvwmckpt"))
}

/// Path of the most recent checkpoint, copied at every save.
pub fn latest_checkpoint(dir: &Path) -> PathBuf {
    dir.join("latest.xvwmckpt")
}

/// Run until `trainer.step == until`, logging and checkpointing into `dir`.
pub fn run(trainer: &mut Trainer, source: Source<'_>, until: u64, dir: Option<&Path>) -> Result<RunSummary> {
    let index = match source {
        Source::Episodes(eps) => Some(AnchorIndex::new(eps)?),
        Source::Fixed(s) if s.is_empty() => return Err(XvwmError::Usage("empty fixed sample set".into())),
        Source::Fixed(_) => None,
    };
    let mut log = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(MetricsLog::open(&d.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |trainer: &Trainer, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(d) = dir {
            let ck = trainer.checkpoint();
            let p = checkpoint_path(d, trainer.step);
            save_checkpoint(&ck, &p)?;
            fs::copy(&p, latest_checkpoint(d))?;
            checkpoints.push(p);
        }
        Ok(())
    };
    while trainer.step < until {
        let loss = match (&source, &index) {
            (Source::Episodes(eps), Some(ix)) => {
                let batch = trainer.draw_batch(eps, ix)?;
                let (refs, samples): (Vec<_>, Vec<_>) = batch.into_iter().unzip();
                trainer.step_on(&samples, Some(&refs))?
            }
            (Source::Fixed(samples), _) => trainer.step_on(samples, None)?,
            _ => unreachable!("index exists for episode sources"),
        } as f64;
        losses.push(loss);
        if let Some(log) = log.as_mut() {
            if trainer.step % trainer.train.log_every == 0 || trainer.step == until {
                log.write(&MetricsRecord {
                    step: trainer.step,
                    loss,
                    lr: trainer.train.lr_at(trainer.step - 1),
                    samples: trainer.exposure.total(),
                    exposure: trainer.exposure.to_json(),
                    wall_time_s: start.elapsed().as_secs_f64(),
                })?;
            }
        }
        let every = trainer.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 && trainer.step < until {
            save(trainer, &mut checkpoints)?;
            if let Some(log) = log.as_mut() {
                log.flush()?;
            }
        }
    }
    save(trainer, &mut checkpoints)?;
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    Ok(RunSummary {
        steps: trainer.step,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_warmup_then_cosine() {
        let c = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            decay_steps: 10,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(4), 1.0);
        assert!((c.lr_at(9) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(14).abs() < 1e-12);
        assert!(c.lr_at(100).abs() < 1e-12);
        let flat = TrainConfig { lr: 0.3, ..Default::default() };
        assert_eq!(flat.lr_at(0), 0.3);
        assert_eq!(flat.lr_at(10_000), 0.3);
    }
}
