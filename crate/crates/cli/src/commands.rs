//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use xvwm_core::dataset::{
    decode_episode, generate_dataset, CumAction, Dataset, Episode, EpisodeMeta, Split, CONTEXT_LEN, EPISODE_MAGIC,
    MANIFEST_FILE,
};
use xvwm_core::eval::report::{
    localization_table, matrix_table, spawn_table, trajectory_error_svg, trajectory_svg, trajectory_table,
    transfer_svg, transfer_table,
};
use xvwm_core::eval::{
    localization_eval, metric_matrix, mse, spawn_eval, trajectory_eval, transfer_study, ConstantGray,
    CopyAnchorOutput, CopyLastContext, ModelPredictor, PredictionRequest, Predictor, SimulatorOracle, TestSet,
    TransferEntry,
};
use xvwm_core::model::{decode_checkpoint, load_checkpoint, Checkpoint, Model, CHECKPOINT_MAGIC};
use xvwm_core::sim::{Frame, ViewId};
use xvwm_core::training::{self, sample_view_pair, AnchorIndex, Exposure, Scheme, SchemeConfig, Source, Trainer};
use xvwm_core::XvwmError;

use crate::config::{file_hash, load, Config, Loaded};
use crate::run::RunDir;
use crate::{Baseline, Cli, Command, EvalArgs, PredictorArgs};

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut loaded = load(cli.config.as_deref(), &cli.overrides)?;
    let root = cli.run_root.clone();
    match cli.command {
        Command::GenData(a) => gen_data(&mut loaded.config, &root, a),
        Command::Train(a) => train(&mut loaded, &root, a),
        Command::EvalLoc(a) => eval_loc(&mut loaded.config, &root, a),
        Command::EvalTraj(a) => eval_traj(&mut loaded.config, &root, a),
        Command::EvalSpawn(a) => eval_spawn(&mut loaded.config, &root, a),
        Command::EvalMatrix(a) => eval_matrix(&mut loaded.config, &root, a),
        Command::TransferStudy(a) => transfer(&mut loaded.config, &root, a),
        Command::Rollout(a) => rollout(&loaded.config, &root, a),
        Command::Serve(a) => serve(&mut loaded.config, &root, a),
        Command::Inspect(a) => inspect(&a.path),
    }
}

fn gen_data(config: &mut Config, root: &Path, a: crate::GenDataArgs) -> anyhow::Result<()> {
    if let Some(n) = a.episodes {
        config.dataset.episodes = n;
    }
    let run = RunDir::create(root, config, &format!("gen-data --seed {}", a.seed))?;
    let out = a.out.unwrap_or_else(|| run.file("dataset"));
    let m = generate_dataset(&out, &config.world, &config.render, &config.dataset, a.seed)?;
    println!(
        "generated {} episodes of {} s at {} fps, {} px, views {}",
        m.dataset.episodes,
        m.dataset.duration_s,
        m.dataset.fps,
        m.render.size,
        names(&m.dataset.views)
    );
    println!("dataset: {}", out.display());
    println!("run: {}", run.path.display());
    Ok(())
}

fn names(views: &[ViewId]) -> String {
    views.iter().map(|v| v.name()).collect::<Vec<_>>().join(",")
}

fn open_dataset(dir: &Path, config: &Config) -> anyhow::Result<Dataset> {
    let ds = Dataset::open(dir)?;
    if ds.render_config().size != config.model.image_size {
        bail!(XvwmError::Config(format!(
            "dataset frames are {} px but the model expects {} (set render.size)",
            ds.render_config().size,
            config.model.image_size
        )));
    }
    Ok(ds)
}

fn train(loaded: &mut Loaded, root: &Path, a: crate::TrainArgs) -> anyhow::Result<()> {
    let config = &mut loaded.config;
    if let Some(s) = &a.scheme {
        let scheme: Scheme = s.parse()?;
        config.scheme.scheme = scheme;
        if scheme == Scheme::SingleView || config.scheme.cross_view_prob == 0.0 {
            config.scheme.cross_view_prob = SchemeConfig::new(scheme).cross_view_prob;
        }
        if !loaded.model_views_set {
            config.model.views = scheme.views().to_vec();
        }
    }
    if let Some(s) = a.steps {
        config.train.max_steps = Some(s);
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    crate::config::validate(config)?;

    if a.dry_run {
        let steps = config.train.max_steps.unwrap_or(1);
        let draws = steps * config.train.batch_size as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut counts: BTreeMap<(ViewId, ViewId), u64> = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(sample_view_pair(&config.scheme, &mut rng)).or_default() += 1;
        }
        println!("scheme {} over {draws} draws ({steps} steps x batch {})", config.scheme.scheme, config.train.batch_size);
        for ((i, o), n) in &counts {
            println!("{i}->{o} {:.4}", *n as f64 / draws as f64);
        }
        return Ok(());
    }

    let data = a.data.expect("clap requires --data without --dry-run");
    let ds = open_dataset(&data, config)?;
    let run = RunDir::create(root, config, &format!("train --data {}", data.display()))?;
    let episodes = ds.load_split(Split::Train, Some(config.scheme.views()))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p, Some(&config.model))?;
            Trainer::resume(ck, config.scheme.clone(), config.train.clone())?
        }
        None => Trainer::new(config.model.clone(), config.scheme.clone(), config.train.clone())?,
    };
    let anchors = AnchorIndex::new(&episodes)?.len();
    let until = config.train.total_steps(anchors);
    println!(
        "training {} from step {} to {until} on {} episodes ({anchors} anchors)",
        config.scheme.scheme,
        trainer.step,
        episodes.len()
    );
    let summary = training::run(&mut trainer, Source::Episodes(&episodes), until, Some(&run.file("checkpoints")))?;
    println!("final loss {:.5} after {} steps", summary.final_loss, summary.steps);
    for (k, v) in trainer.exposure.to_json() {
        println!("exposure {k} {v}");
    }
    if let Some(last) = summary.checkpoints.last() {
        println!("checkpoint: {} ({})", last.display(), file_hash(last)?);
    }
    println!("run: {}", run.path.display());
    Ok(())
}

/// The model behind a predictor, if any, and the id reports cite.
struct LoadedModel {
    model: Option<Model>,
    hash: String,
}

fn load_model(p: &PredictorArgs) -> anyhow::Result<LoadedModel> {
    match &p.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
            Ok(LoadedModel {
                hash: file_hash(path)?,
                model: Some(Model::from_params(ck.config, ck.params)),
            })
        }
        None if p.oracle => Ok(LoadedModel {
            model: None,
            hash: "oracle".into(),
        }),
        None => Ok(LoadedModel {
            model: None,
            hash: "baseline".into(),
        }),
    }
}

fn predictor<'m>(p: &PredictorArgs, loaded: &'m LoadedModel, config: &Config) -> Box<dyn Predictor + 'm> {
    if let Some(m) = &loaded.model {
        return Box::new(ModelPredictor::new(m, config.eval.ddim_steps));
    }
    if p.oracle {
        return Box::new(SimulatorOracle {
            render: config.render.clone(),
        });
    }
    match p.baseline.expect("clap requires one predictor") {
        Baseline::CopyLastOutputView => Box::new(CopyAnchorOutput),
        Baseline::CopyLastContext => Box::new(CopyLastContext),
        Baseline::ConstantGray => Box::new(ConstantGray),
    }
}

fn test_set(ds: &Dataset, limit: Option<usize>, views: &[ViewId]) -> anyhow::Result<TestSet> {
    let entries: Vec<_> = ds.entries(Split::Test).take(limit.unwrap_or(usize::MAX)).collect();
    if entries.is_empty() {
        bail!(XvwmError::Config("dataset has no test episodes".into()));
    }
    let episodes = entries
        .into_iter()
        .map(|e| ds.load(e, Some(views)))
        .collect::<xvwm_core::Result<Vec<_>>>()?;
    Ok(TestSet {
        episodes,
        world: ds.world(0),
        render: ds.render_config().clone(),
    })
}

/// Load data and predictor for an evaluation command; the model's size wins.
fn eval_setup(config: &mut Config, a: &EvalArgs) -> anyhow::Result<(LoadedModel, Dataset)> {
    if let Some(s) = a.seed {
        config.eval.seed = s;
    }
    let loaded = load_model(&a.predictor)?;
    if let Some(m) = &loaded.model {
        config.model = m.config.clone();
    }
    let ds = Dataset::open(&a.data)?;
    config.render = ds.render_config().clone();
    if loaded.model.is_none() {
        config.model.image_size = config.render.size;
    }
    open_dataset(&a.data, config)?;
    Ok((loaded, ds))
}

fn header(config: &Config, hash: &str) -> String {
    format!("# checkpoint {hash}\n# config {}\n", config.hash())
}

fn eval_loc(config: &mut Config, root: &Path, a: EvalArgs) -> anyhow::Result<()> {
    let (loaded, ds) = eval_setup(config, &a)?;
    let pred = predictor(&a.predictor, &loaded, config);
    let have = &ds.manifest.dataset.views;
    let inputs: Vec<ViewId> = pred
        .views()
        .unwrap_or(have)
        .iter()
        .copied()
        .filter(|v| *v != ViewId::Bev && have.contains(v))
        .collect();
    if inputs.is_empty() {
        bail!(XvwmError::Config("no input view besides the top-down view to localize from".into()));
    }
    let mut needed = inputs.clone();
    needed.push(ViewId::Bev);
    let test = test_set(&ds, a.limit, &needed)?;
    let mut report = localization_eval(pred.as_ref(), &test, &config.eval, &inputs)?;
    if !a.no_baselines && a.predictor.baseline.is_none() {
        let base = localization_eval(&CopyAnchorOutput, &test, &config.eval, &inputs)?;
        report.rows.extend(base.rows);
    }
    let run = RunDir::create(root, config, "eval-loc")?;
    run.write_json("localization.json", &json!({"checkpoint": loaded.hash, "config": config.hash(), "report": report}))?;
    let table = header(config, &loaded.hash) + &localization_table(&report);
    run.write("localization.md", &table)?;
    print!("{table}");
    println!("run: {}", run.path.display());
    Ok(())
}

fn eval_traj(config: &mut Config, root: &Path, a: crate::TrajArgs) -> anyhow::Result<()> {
    let args = EvalArgs {
        predictor: a.predictor,
        data: a.data,
        seed: a.seed,
        limit: None,
        no_baselines: true,
    };
    let (loaded, ds) = eval_setup(config, &args)?;
    let pred = predictor(&args.predictor, &loaded, config);
    let entry = match a.episode {
        Some(id) => ds
            .entries(Split::Test)
            .find(|e| e.meta.id == id)
            .ok_or_else(|| XvwmError::Usage(format!("episode {id} is not in the test split")))?,
        None => ds
            .entries(Split::Test)
            .next()
            .ok_or_else(|| XvwmError::Config("dataset has no test episodes".into()))?,
    };
    let ep = ds.load(entry, Some(&[ViewId::Ego, ViewId::Bev]))?;
    let test = TestSet {
        episodes: Vec::new(),
        world: ds.world(0),
        render: ds.render_config().clone(),
    };
    let trace = trajectory_eval(pred.as_ref(), &test, &ep, a.stride, config.eval.seed)?;
    let run = RunDir::create(root, config, "eval-traj")?;
    run.write_json("trajectory.json", &json!({"checkpoint": loaded.hash, "config": config.hash(), "trace": trace}))?;
    run.write("trajectory.svg", &trajectory_svg(&trace))?;
    run.write("trajectory_error.svg", &trajectory_error_svg(&trace))?;
    let table = header(config, &loaded.hash) + &trajectory_table(&trace);
    run.write("trajectory.md", &table)?;
    print!("{table}");
    println!("run: {}", run.path.display());
    Ok(())
}

fn eval_spawn(config: &mut Config, root: &Path, a: EvalArgs) -> anyhow::Result<()> {
    let (loaded, ds) = eval_setup(config, &a)?;
    let pred = predictor(&a.predictor, &loaded, config);
    let test = test_set(&ds, a.limit, &[ViewId::Ego, ViewId::Bev])?;
    let mut rows = vec![spawn_eval(pred.as_ref(), &test, &config.eval)?];
    if !a.no_baselines && a.predictor.baseline.is_none() {
        rows.push(spawn_eval(&CopyLastContext, &test, &config.eval)?);
        rows.push(spawn_eval(&ConstantGray, &test, &config.eval)?);
    }
    let run = RunDir::create(root, config, "eval-spawn")?;
    run.write_json("spawn.json", &json!({"checkpoint": loaded.hash, "config": config.hash(), "rows": rows}))?;
    let table = header(config, &loaded.hash) + &spawn_table(&rows);
    run.write("spawn.md", &table)?;
    print!("{table}");
    println!("run: {}", run.path.display());
    Ok(())
}

fn eval_matrix(config: &mut Config, root: &Path, a: EvalArgs) -> anyhow::Result<()> {
    let (loaded, ds) = eval_setup(config, &a)?;
    let pred = predictor(&a.predictor, &loaded, config);
    let have = &ds.manifest.dataset.views;
    let views: Vec<ViewId> = pred.views().unwrap_or(have).iter().copied().filter(|v| have.contains(v)).collect();
    let test = test_set(&ds, a.limit, &views)?;
    let m = metric_matrix(pred.as_ref(), &test, &config.eval, &views)?;
    let run = RunDir::create(root, config, "eval-matrix")?;
    run.write_json("matrix.json", &json!({"checkpoint": loaded.hash, "config": config.hash(), "matrix": m}))?;
    let table = header(config, &loaded.hash) + &matrix_table(&m);
    run.write("matrix.md", &table)?;
    print!("{table}");
    println!("run: {}", run.path.display());
    Ok(())
}

fn transfer(config: &mut Config, root: &Path, a: crate::TransferArgs) -> anyhow::Result<()> {
    if let Some(s) = a.seed {
        config.eval.seed = s;
    }
    let ds = Dataset::open(&a.data)?;
    config.render = ds.render_config().clone();
    let mut models = Vec::new();
    for p in &a.checkpoints {
        let ck = load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?;
        let Some(train) = &ck.train else {
            bail!(XvwmError::Config(format!("{} has no training state", p.display())));
        };
        let scheme = Scheme::from_code(train.scheme)
            .ok_or_else(|| XvwmError::Format { field: "train_state", msg: format!("unknown scheme code {}", train.scheme) })?;
        let exposure = Exposure(train.exposure);
        let label = format!("{}@{}", scheme, ck.step);
        models.push((label, scheme, ck.step, exposure, file_hash(p)?, Model::from_params(ck.config, ck.params)));
    }
    let preds: Vec<ModelPredictor<'_>> = models
        .iter()
        .map(|m| {
            let mut p = ModelPredictor::new(&m.5, config.eval.ddim_steps);
            p.label = m.0.clone();
            p
        })
        .collect();
    let entries: Vec<TransferEntry<'_>> = models
        .iter()
        .zip(&preds)
        .map(|(m, p)| TransferEntry {
            label: m.0.clone(),
            scheme: m.1.to_string(),
            step: m.2,
            exposure: m.3.clone(),
            image_size: m.5.config.image_size,
            predictor: p,
        })
        .collect();
    let test = test_set(&ds, a.limit, &[ViewId::Ego])?;
    let report = transfer_study(&entries, &test, &config.eval)?;
    let hashes: Vec<&str> = models.iter().map(|m| m.4.as_str()).collect();
    let run = RunDir::create(root, config, "transfer-study")?;
    run.write_json("transfer.json", &json!({"checkpoints": hashes, "config": config.hash(), "report": report}))?;
    run.write("transfer.svg", &transfer_svg(&report))?;
    let table = format!("# checkpoints {}\n# config {}\n", hashes.join(" "), config.hash()) + &transfer_table(&report);
    run.write("transfer.md", &table)?;
    print!("{table}");
    println!("run: {}", run.path.display());
    Ok(())
}

fn rollout(config: &Config, root: &Path, a: crate::RolloutArgs) -> anyhow::Result<()> {
    let mut config = config.clone();
    let view: ViewId = a.view.parse()?;
    let loaded = load_model(&a.predictor)?;
    if let Some(m) = &loaded.model {
        config.model = m.config.clone();
    }
    let ds = Dataset::open(&a.data)?;
    config.render = ds.render_config().clone();
    let pred = predictor(&a.predictor, &loaded, &config);
    if let Some(vs) = pred.views() {
        if !vs.contains(&view) {
            bail!(XvwmError::Config(format!("predictor does not produce view {view}")));
        }
    }
    let entry = match a.episode {
        Some(id) => ds
            .entries
            .iter()
            .find(|e| e.meta.id == id)
            .ok_or_else(|| XvwmError::Usage(format!("no episode {id}")))?,
        None => ds
            .entries(Split::Test)
            .next()
            .ok_or_else(|| XvwmError::Config("dataset has no test episodes".into()))?,
    };
    let ep = ds.load(entry, Some(&[view]))?;
    let world = ds.world(ep.sky_id);
    let start = CONTEXT_LEN - 1;
    let steps = a.steps.min(ep.len() - 1 - start);
    if steps == 0 {
        bail!(XvwmError::Usage("rollout needs at least one step".into()));
    }
    let truth = ep.frames_of(view)?;
    let mut context: Vec<Frame> = truth[..CONTEXT_LEN].to_vec();
    let mut generated = Vec::with_capacity(steps);
    let mut errors = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = start + i;
        let req = PredictionRequest {
            context: &context,
            input_view: view,
            output_view: view,
            rel_time: 1.0 / ep.fps(),
            cum_action: CumAction::between(&ep.poses[t], &ep.poses[t + 1]),
            target_pose: ep.poses[t + 1],
            world: &world,
            anchor_output: None,
            seed: a.seed.wrapping_add(i as u64),
        };
        let f = pred.predict(std::slice::from_ref(&req))?.remove(0);
        errors.push(mse(&f, &truth[t + 1])?);
        context.remove(0);
        context.push(f.clone());
        generated.push(f);
    }
    let run = RunDir::create(&root, &config, "rollout")?;
    let sheet = contact_sheet(&[&truth[start + 1..start + 1 + steps], &generated]);
    write_png(&run.file("rollout.png"), &sheet)?;
    run.write_json(
        "rollout.json",
        &json!({"checkpoint": loaded.hash, "config": config.hash(), "episode": ep.id, "view": view, "mse": errors}),
    )?;
    println!("# checkpoint {}", loaded.hash);
    for (i, e) in errors.iter().enumerate() {
        println!("step {} mse {e:.5}", i + 1);
    }
    println!("run: {}", run.path.display());
    Ok(())
}

/// Rows of equally sized frames side by side.
fn contact_sheet(rows: &[&[Frame]]) -> (usize, usize, Vec<u8>) {
    let size = rows[0][0].size();
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let (w, h) = (cols * size, rows.len() * size);
    let mut px = vec![0u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, f) in row.iter().enumerate() {
            for y in 0..size {
                let dst = ((r * size + y) * w + c * size) * 3;
                let src = y * size * 3;
                px[dst..dst + size * 3].copy_from_slice(&f.pixels()[src..src + size * 3]);
            }
        }
    }
    (w, h, px)
}

fn write_png(path: &Path, (w, h, px): &(usize, usize, Vec<u8>)) -> anyhow::Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, *w as u32, *h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(px)?;
    Ok(())
}

fn serve(config: &mut Config, root: &Path, a: crate::ServeArgs) -> anyhow::Result<()> {
    use std::sync::Arc;
    use xvwm_core::sim::make_world;
    use xvwm_serve::{AppState, Backend, SessionEnv, Worker};

    if let Some(h) = a.host {
        config.serve.host = h;
    }
    if let Some(p) = a.port {
        config.serve.port = p;
    }
    if let Some(s) = a.seed {
        config.serve.session.seed = s;
    }
    let (backend, checkpoint_id) = match &a.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?;
            config.model = ck.config.clone();
            config.render.size = ck.config.image_size;
            (Backend::Model(Model::from_params(ck.config, ck.params)), file_hash(p)?)
        }
        None => (Backend::Oracle(config.render.clone()), "oracle".to_string()),
    };
    let env = SessionEnv {
        config: config.serve.session.clone(),
        world: Arc::new(make_world(config.dataset.world_seed, &config.world)?),
        render: config.render.clone(),
        checkpoint_id,
        worker: Worker::spawn(backend),
    };
    xvwm_serve::Session::new("probe", env.clone()).map_err(XvwmError::Config)?;
    let run = RunDir::create(root, config, "serve")?;
    let addr = format!("{}:{}", config.serve.host, config.serve.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| XvwmError::Startup(format!("cannot listen on {addr}: {e}")))?;
        println!("listening on ws://{}/ws", listener.local_addr()?);
        println!("run: {}", run.path.display());
        xvwm_serve::serve(listener, AppState::new(env)).await?;
        anyhow::Ok(())
    })
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        if !path.join(MANIFEST_FILE).exists() {
            bail!(XvwmError::Usage(format!("{} is not a dataset directory", path.display())));
        }
        let ds = Dataset::open(path)?;
        let train = ds.entries(Split::Train).count();
        let test = ds.entries(Split::Test).count();
        let out = json!({
            "kind": "dataset",
            "episodes": ds.entries.len(),
            "train": train,
            "test": test,
            "manifest": ds.manifest,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck: Checkpoint = decode_checkpoint(&bytes)?;
        let params = ck.params.num_scalars();
        let train = ck.train.as_ref().map(|t| {
            json!({
                "scheme": Scheme::from_code(t.scheme).map(|s| s.name()),
                "optimizer_step": t.optimizer.step,
                "exposure": Exposure(t.exposure).to_json(),
            })
        });
        let out = json!({
            "kind": "checkpoint",
            "hash": file_hash(path)?,
            "step": ck.step,
            "parameters": params,
            "config": ck.config,
            "train_state": train,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    if bytes.starts_with(EPISODE_MAGIC) {
        let ep: Episode = decode_episode(
            &bytes,
            EpisodeMeta {
                id: 0,
                world_seed: 0,
                sky_id: 0,
            },
        )?;
        let out = json!({
            "kind": "episode",
            "frames": ep.len(),
            "fps": ep.fps(),
            "size": ep.size,
            "views": ep.views,
            "first_pose": ep.poses.first(),
            "last_pose": ep.poses.last(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    bail!(XvwmError::Format {
        field: "magic",
        msg: format!("{} is neither an episode nor a checkpoint", path.display()),
    })
}
