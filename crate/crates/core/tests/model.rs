use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xvwm_core::dataset::CumAction;
use xvwm_core::model::{
    decode_checkpoint, embed_conditioning, encode_checkpoint, eps_loss, forward, load_checkpoint, save_checkpoint,
    Checkpoint, CondInput, Model, ModelConfig, ModelParams, NoiseSchedule, RngState, SampleRequest, TrainState,
};
use xvwm_core::sim::{Frame, ViewId};
use xvwm_core::XvwmError;
use xvwm_tensor::{finite_diff_check, sgd_step, AdamW, AdamWConfig, Graph, Tensor};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        hidden_dim: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        freq_dim: 8,
        diffusion_steps: 10,
        context_len: 4,
        views: vec![ViewId::Ego, ViewId::Bev],
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        hidden_dim: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2,
        freq_dim: 16,
        diffusion_steps: 50,
        context_len: 4,
        views: vec![ViewId::Ego, ViewId::Bev],
    }
}

fn randn<T: xvwm_tensor::Real>(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * scale)
    })
}

fn random_frame(size: usize, rng: &mut ChaCha8Rng) -> Frame {
    Frame::new(size, size, (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap()
}

fn cond(t: usize, view: ViewId) -> CondInput {
    CondInput {
        t_diff: t,
        rel_time: 0.4,
        cum_action: CumAction {
            dx: 0.5,
            dy: -0.2,
            dphi: 0.3,
        },
        output_view: view,
    }
}

/// Give every zero-initialized tensor small random values so all paths carry
/// gradient.
fn perturb_all<T: xvwm_tensor::Real>(params: &mut ModelParams<T>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in params.tensors.iter_mut() {
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = *x + T::of(z * scale);
        }
    }
}

#[test]
fn zero_init_blocks_ignore_context() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng);
    let (n, pd) = (cfg.tokens(), cfg.patch_dim());
    let noisy: Tensor<f32> = randn(&[1, n, pd], &mut rng, 1.0);
    let ctx_a: Tensor<f32> = randn(&[1, 4, n, pd], &mut rng, 1.0);
    let ctx_b: Tensor<f32> = randn(&[1, 4, n, pd], &mut rng, 1.0);
    let run = |params: &ModelParams<f32>, ctx: &Tensor<f32>, c: CondInput| {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let y = forward(&mut g, &cfg, &p, noisy.clone(), ctx.clone(), &[c]).unwrap();
        g.value(y).clone()
    };
    let a = run(&params, &ctx_a, cond(5, ViewId::Ego));
    let b = run(&params, &ctx_b, cond(30, ViewId::Bev));
    assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);

    let mut moved = params.clone();
    for name in moved.names().to_vec() {
        if name.ends_with(".ada.w") {
            let t = moved.get_mut(&name).unwrap();
            *t = randn(t.shape(), &mut rng, 0.1);
        }
    }
    let a = run(&moved, &ctx_a, cond(5, ViewId::Ego));
    let b = run(&moved, &ctx_b, cond(5, ViewId::Ego));
    assert!(a.max_abs_diff(&b).unwrap() > 1e-4);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng);
    perturb_all(&mut params, &mut rng, 0.3);
    let (n, pd) = (cfg.tokens(), cfg.patch_dim());
    let noisy: Tensor<f64> = randn(&[2, n, pd], &mut rng, 1.0);
    let ctx: Tensor<f64> = randn(&[2, 4, n, pd], &mut rng, 1.0);
    let eps: Tensor<f64> = randn(&[2, n, pd], &mut rng, 1.0);
    let conds = [cond(3, ViewId::Ego), cond(7, ViewId::Bev)];

    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let loss = eps_loss(&mut g, &cfg, &p, noisy.clone(), ctx.clone(), &conds, eps.clone()).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = p.vars.iter().map(|&v| grads.wrt(v).unwrap().clone()).collect();

    let report = finite_diff_check(
        |ts| {
            let q = ModelParams::from_parts(params.names().to_vec(), ts.to_vec());
            let mut g = Graph::inference();
            let p = q.bind(&mut g, false);
            let l = eps_loss(&mut g, &cfg, &p, noisy.clone(), ctx.clone(), &conds, eps.clone()).unwrap();
            g.value(l).item().unwrap()
        },
        &params.tensors,
        &analytic,
        1e-5,
        1e-4,
    );
    for (i, name) in params.names().iter().enumerate() {
        assert!(report.param_passed(i), "{name}: rel error {}", report.per_param[i]);
    }
    assert!(report.checked_elements > 1000);
}

#[test]
fn forward_noising_moments() {
    // Oracle: cumulative product of 1 - β computed here from the β list.
    let s = NoiseSchedule::linear(100);
    let mut ab = 1.0;
    for (t, b) in s.betas.iter().enumerate() {
        ab *= 1.0 - b;
        assert!((ab - s.alpha_bars[t]).abs() < 1e-12);
    }
    assert!(s.alpha_bars[99] < 0.05);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let x0 = vec![0.6f32; n];
    for t in [0usize, 20, 60, 99] {
        let eps: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let mean = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = s.alpha_bars[t];
        assert!((mean - ab.sqrt() * 0.6).abs() < 0.01, "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.01 + 0.02 * (1.0 - ab), "t={t} var {var}");
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ctx: Vec<Frame> = (0..4).map(|_| random_frame(16, &mut rng)).collect();
    let req = |seed| SampleRequest {
        context: &ctx,
        rel_time: 0.2,
        cum_action: CumAction::default(),
        output_view: ViewId::Bev,
        seed,
    };
    let a = model.sample(&[req(9)], 5).unwrap();
    let b = model.sample(&[req(9)], 5).unwrap();
    let c = model.sample(&[req(10)], 5).unwrap();
    assert_eq!(a[0], b[0]);
    assert_ne!(a[0], c[0]);
    // Batching does not change individual results.
    let ab = model.sample(&[req(9), req(10)], 5).unwrap();
    assert_eq!(ab[0], a[0]);
    assert_eq!(ab[1], c[0]);
}

#[test]
fn sampling_rejects_unknown_view() {
    let model = Model::new(small_config(), 0).unwrap();
    let ctx = vec![Frame::filled(16, [0, 0, 0]); 4];
    let err = model
        .sample(
            &[SampleRequest {
                context: &ctx,
                rel_time: 0.0,
                cum_action: CumAction::default(),
                output_view: ViewId::Front,
                seed: 0,
            }],
            3,
        )
        .unwrap_err();
    assert_eq!(err.class(), "usage");
}

#[test]
fn conditioning_terms_add() {
    // c(t, r, a, v) - c(t', r, a, v) must not depend on r, a or v.
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng);
    perturb_all(&mut params, &mut rng, 0.2);
    let embed = |conds: &[CondInput]| {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let c = embed_conditioning(&mut g, &cfg, &p, conds).unwrap();
        g.value(c).clone()
    };
    let base = cond(4, ViewId::Ego);
    let other = CondInput {
        rel_time: -1.2,
        cum_action: CumAction {
            dx: -3.0,
            dy: 1.0,
            dphi: -2.0,
        },
        output_view: ViewId::Bev,
        ..base
    };
    let e = embed(&[base, CondInput { t_diff: 40, ..base }, other, CondInput { t_diff: 40, ..other }]);
    let d = cfg.hidden_dim;
    let row = |i: usize| &e.data()[i * d..(i + 1) * d];
    for j in 0..d {
        let d1 = row(0)[j] - row(1)[j];
        let d2 = row(2)[j] - row(3)[j];
        assert!((d1 - d2).abs() < 1e-12);
    }
    assert!((0..d).any(|j| (row(0)[j] - row(2)[j]).abs() > 1e-3));
}

#[test]
fn untrained_loss_is_near_unit_variance() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng);
    let (n, pd, b) = (cfg.tokens(), cfg.patch_dim(), 125);
    let mut total = 0.0;
    for _ in 0..8 {
        let noisy: Tensor<f32> = randn(&[b, n, pd], &mut rng, 1.0);
        let ctx: Tensor<f32> = randn(&[b, 4, n, pd], &mut rng, 1.0);
        let eps: Tensor<f32> = randn(&[b, n, pd], &mut rng, 1.0);
        let conds: Vec<CondInput> = (0..b)
            .map(|_| cond(rng.gen_range(0..cfg.diffusion_steps), ViewId::Ego))
            .collect();
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let l = eps_loss(&mut g, &cfg, &p, noisy, ctx, &conds, eps).unwrap();
        let l = g.value(l).item().unwrap();
        assert!(l >= 0.0);
        total += l as f64;
    }
    let mean = total / 8.0;
    assert!((mean - 1.0).abs() < 0.1, "initial loss {mean}");
}

#[test]
fn context_order_matters_once_temporal_table_moves() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng);
    perturb_all(&mut params, &mut rng, 0.05);
    let (n, pd) = (cfg.tokens(), cfg.patch_dim());
    let noisy: Tensor<f32> = randn(&[1, n, pd], &mut rng, 1.0);
    let ctx: Tensor<f32> = randn(&[1, 4, n, pd], &mut rng, 1.0);
    let frame = n * pd;
    let mut rev = Vec::with_capacity(4 * frame);
    for f in (0..4).rev() {
        rev.extend_from_slice(&ctx.data()[f * frame..(f + 1) * frame]);
    }
    let rev = Tensor::new(&[1, 4, n, pd], rev).unwrap();
    let run = |ctx: &Tensor<f32>| {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let y = forward(&mut g, &cfg, &p, noisy.clone(), ctx.clone(), &[cond(3, ViewId::Ego)]).unwrap();
        g.value(y).clone()
    };
    assert!(run(&ctx).max_abs_diff(&run(&rev)).unwrap() > 1e-5);
}

#[test]
fn view_embedding_receives_gradient_for_used_row_only() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng);
    let (n, pd) = (cfg.tokens(), cfg.patch_dim());
    let noisy: Tensor<f32> = randn(&[2, n, pd], &mut rng, 1.0);
    let ctx: Tensor<f32> = randn(&[2, 4, n, pd], &mut rng, 1.0);
    let eps: Tensor<f32> = randn(&[2, n, pd], &mut rng, 1.0);
    let conds = [cond(10, ViewId::Bev), cond(20, ViewId::Bev)];
    let mut opt = AdamW::new(AdamWConfig::default(), &params.tensors);
    let vt = params.position("view_table").unwrap();
    for step in 0..2 {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let l = eps_loss(&mut g, &cfg, &p, noisy.clone(), ctx.clone(), &conds, eps.clone()).unwrap();
        let grads = g.backward(l).unwrap();
        let gs: Vec<Tensor<f32>> = p.vars.iter().map(|&v| grads.wrt(v).unwrap().clone()).collect();
        if step == 1 {
            let d = cfg.hidden_dim;
            let ego_row = cfg.view_row(ViewId::Ego).unwrap();
            let bev_row = cfg.view_row(ViewId::Bev).unwrap();
            let gv = gs[vt].data();
            assert!(gv[ego_row * d..(ego_row + 1) * d].iter().all(|&x| x == 0.0));
            assert!(gv[bev_row * d..(bev_row + 1) * d].iter().any(|&x| x.abs() > 0.0));
        }
        opt.step(&mut params.tensors, &gs).unwrap();
    }
}

#[test]
fn frozen_pair_loss_decreases_monotonically() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng);
    let (n, pd) = (cfg.tokens(), cfg.patch_dim());
    let noisy: Tensor<f32> = randn(&[1, n, pd], &mut rng, 1.0);
    let ctx: Tensor<f32> = randn(&[1, 4, n, pd], &mut rng, 1.0);
    let eps: Tensor<f32> = randn(&[1, n, pd], &mut rng, 1.0);
    let conds = [cond(17, ViewId::Ego)];
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let l = eps_loss(&mut g, &cfg, &p, noisy.clone(), ctx.clone(), &conds, eps.clone()).unwrap();
        losses.push(g.value(l).item().unwrap());
        let grads = g.backward(l).unwrap();
        let gs: Vec<Tensor<f32>> = p.vars.iter().map(|&v| grads.wrt(v).unwrap().clone()).collect();
        sgd_step(&mut params.tensors, &gs, 0.05).unwrap();
    }
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{losses:?}");
    }
    assert!(losses[49] < 0.9 * losses[0], "{losses:?}");
}

fn sample_checkpoint(with_state: bool) -> Checkpoint {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng);
    perturb_all(&mut params, &mut rng, 0.1);
    let train = with_state.then(|| {
        let mut opt = AdamW::new(AdamWConfig::default(), &params.tensors);
        opt.step = 3;
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = i as f32 * 1e-3;
            }
        }
        let mut exposure = [0u64; 16];
        exposure[1] = 7;
        exposure[4] = 9;
        TrainState {
            scheme: 1,
            optimizer: opt,
            rng: RngState {
                seed: [5; 32],
                stream: 2,
                word_pos: 1 << 70,
            },
            exposure,
        }
    });
    Checkpoint {
        config: cfg,
        step: 3,
        params,
        train,
    }
}

#[test]
fn checkpoint_round_trip() {
    for with_state in [false, true] {
        let ck = sample_checkpoint(with_state);
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.step, ck.step);
        assert_eq!(back.params.names(), ck.params.names());
        assert_eq!(back.params.tensors, ck.params.tensors);
        assert_eq!(back.train, ck.train);
        assert_eq!(encode_checkpoint(&back), bytes);
    }
}

#[test]
fn checkpoint_matches_golden_file() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/checkpoint_v1.xvwmckpt");
    let bytes = encode_checkpoint(&sample_checkpoint(true));
    if std::env::var_os("XVWM_BLESS").is_some() {
        std::fs::write(&path, &bytes).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden checkpoint present");
    assert_eq!(&golden[..8], b"XVWMCKPT");
    assert_eq!(golden, bytes);
}

#[test]
fn checkpoint_corruption_is_reported() {
    let bytes = encode_checkpoint(&sample_checkpoint(true));
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(decode_checkpoint(&bad), Err(XvwmError::Format { field: "magic", .. })));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(XvwmError::Format { field: "version", .. })));
    for cut in [5, 30, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert_eq!(err.class(), "format", "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(XvwmError::Format { field: "trailing", .. })));
}

#[test]
fn loading_with_other_patch_size_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.xvwmckpt");
    save_checkpoint(&sample_checkpoint(false), &path).unwrap();
    let expected = ModelConfig {
        patch_size: 2,
        ..tiny_config()
    };
    let err = load_checkpoint(&path, Some(&expected)).unwrap_err();
    assert_eq!(err.class(), "config");
    let msg = err.to_string();
    assert!(msg.contains("patch_size"), "{msg}");
    assert!(!msg.contains("hidden_dim"), "{msg}");
    assert!(load_checkpoint(&path, Some(&tiny_config())).is_ok());
}
