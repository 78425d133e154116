use neurodecode::diffusion::*;
use neurodecode::tensor::{Graph, Tensor};
use neurodecode::world::embed::{ConditionSet, COND_DIM, IMAGE_COND_TOKENS, TEXT_COND_TOKENS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomized(config: DenoiserConfig, seed: u64) -> Denoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Denoiser::new(config, &mut rng);
    let names: Vec<String> = d.params.names().cloned().collect();
    for n in names {
        for v in d.params.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    d
}

fn conds(rng: &mut ChaCha8Rng, mix: f64) -> ConditionSet {
    ConditionSet::new(
        Some(Tensor::randn(IMAGE_COND_TOKENS, COND_DIM, 1.0, rng)),
        Some(Tensor::randn(TEXT_COND_TOKENS, COND_DIM, 1.0, rng)),
        mix,
    )
}

fn layer_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0].starts_with('b') && parts.len() > 2 {
        format!("{}.{}", parts[0], parts[1])
    } else {
        parts[0].to_string()
    }
}

fn gradient_check(mode: MixMode) {
    let mut config = DenoiserConfig::image();
    config.mix_mode = mode;
    let mut model = randomized(config, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c_full = conds(&mut rng, 0.35);
    let c_null = ConditionSet::unconditional();
    let mut c_img = conds(&mut rng, 0.5);
    c_img.text = None;
    let zs: Vec<Vec<f64>> = (0..3).map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let target = Tensor::randn(12, 8, 1.0, &mut rng);

    let loss_of = |m: &Denoiser| -> (Graph, neurodecode::tensor::NodeId) {
        let batch = [
            Sample { z: &zs[0], t: 17, cond: &c_full },
            Sample { z: &zs[1], t: 60, cond: &c_null },
            Sample { z: &zs[2], t: 93, cond: &c_img },
        ];
        let mut g = Graph::new();
        let out = m.forward_graph(&mut g, &batch, None).unwrap();
        let loss = g.mse(out, &target).unwrap();
        (g, loss)
    };
    let (g, loss) = loss_of(&model);
    let grads = g.backward(loss).unwrap();

    let mut layers: Vec<String> = model.params.names().map(|n| layer_of(n)).collect();
    layers.dedup();
    let h = 1e-5;
    for layer in layers {
        let names: Vec<String> = model.params.names().filter(|n| layer_of(n) == layer).cloned().collect();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let name = &names[rng.random_range(0..names.len())];
            let k = rng.random_range(0..model.params.get(name).unwrap().len());
            let orig = model.params.get(name).unwrap().data()[k];
            model.params.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let (gp, lp) = loss_of(&model);
            model.params.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let (gm, lm) = loss_of(&model);
            model.params.get_mut(name).unwrap().data_mut()[k] = orig;
            let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let an = grads[name].data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "{layer}: max relative error {worst}");
    }
}

#[test]
fn gradients_match_finite_differences_output_mixing() {
    gradient_check(MixMode::Output);
}

#[test]
fn gradients_match_finite_differences_score_mixing() {
    gradient_check(MixMode::Score);
}

#[test]
fn forward_is_shape_preserving_and_zero_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Denoiser::new(DenoiserConfig::text(), &mut rng);
    let c = conds(&mut rng, 0.9);
    let out = m.predict(&[0.5; 16], 40, &c).unwrap();
    assert_eq!(out, vec![0.0; 16]);
    assert!(matches!(
        m.predict(&[0.5; 15], 40, &c),
        Err(DiffusionError::LatentShape { got: 15, expected: 16 })
    ));
}

#[test]
fn mix_endpoints_collapse_exactly() {
    for mode in [MixMode::Output, MixMode::Score] {
        let mut config = DenoiserConfig::image();
        config.mix_mode = mode;
        let m = randomized(config, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = conds(&mut rng, 1.0);
        let b = conds(&mut rng, 1.0);

        // mix = 1: the text context is irrelevant, and equals an image-only run
        let mut swapped = a.clone();
        swapped.text = b.text.clone();
        let mut img_only = a.clone();
        img_only.text = None;
        let base = m.predict(&z, 30, &a).unwrap();
        assert_eq!(base, m.predict(&z, 30, &swapped).unwrap());
        assert_eq!(base, m.predict(&z, 30, &img_only).unwrap());

        // mix = 0: symmetric
        let a0 = ConditionSet { mix: 0.0, ..a.clone() };
        let mut swapped = a0.clone();
        swapped.image = b.image.clone();
        let mut txt_only = a0.clone();
        txt_only.image = None;
        let base = m.predict(&z, 30, &a0).unwrap();
        assert_eq!(base, m.predict(&z, 30, &swapped).unwrap());
        assert_eq!(base, m.predict(&z, 30, &txt_only).unwrap());
    }
}

#[test]
fn cross_attention_is_linear_in_mix() {
    let m = randomized(DenoiserConfig::image(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = conds(&mut rng, 0.0);
    let (_, t0) = m.predict_traced(&z, 50, &ConditionSet { mix: 0.0, ..c.clone() }).unwrap();
    let (_, t1) = m.predict_traced(&z, 50, &ConditionSet { mix: 1.0, ..c.clone() }).unwrap();
    for mix in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let (_, tr) = m.predict_traced(&z, 50, &ConditionSet { mix, ..c.clone() }).unwrap();
        for layer in &tr {
            let want = layer
                .image
                .zip_map(&layer.text, "interp", |a, b| mix * a + (1.0 - mix) * b)
                .unwrap();
            assert!(layer.mixed.max_abs_diff(&want) < 1e-10);
        }
        // the first block sees mix-independent inputs, so its output
        // interpolates the two endpoint runs
        let want = t1[0]
            .mixed
            .zip_map(&t0[0].mixed, "interp", |a, b| mix * a + (1.0 - mix) * b)
            .unwrap();
        assert!(tr[0].mixed.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn sampler_rules() {
    let m = randomized(DenoiserConfig::text(), 9);
    let s = Schedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = conds(&mut rng, 0.9);
    let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut cfg = SamplerConfig::text(1);
    cfg.strength = 0.0;
    assert_eq!(ddim_sample(&m, &s, Some(&z), &cfg, &c, &mut rng).unwrap(), z);

    let cfg = SamplerConfig::text(1);
    let a = ddim_sample(&m, &s, Some(&z), &cfg, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = ddim_sample(&m, &s, Some(&z), &cfg, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(
        ddim_sample(&m, &s, None, &cfg, &c, &mut rng),
        Err(DiffusionError::MissingInput)
    );

    let mut full = cfg.clone();
    full.strength = 1.0;
    let x = ddim_sample(&m, &s, None, &full, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let y = ddim_sample(&m, &s, None, &full, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(x, y);

    // mix = 1 equals an image-only run under the same seed
    let mut one = cfg.clone();
    one.mix = 1.0;
    let mut img_only = c.clone();
    img_only.text = None;
    let p = ddim_sample(&m, &s, Some(&z), &one, &c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let q = ddim_sample(&m, &s, Some(&z), &cfg, &img_only, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(p, q);

    let mut bad = cfg.clone();
    bad.mix = 1.5;
    assert_eq!(
        ddim_sample(&m, &s, Some(&z), &bad, &c, &mut rng),
        Err(DiffusionError::OutOfRange("mix", 1.5))
    );
}

#[test]
fn timesteps_are_even_and_anchored() {
    let t = timesteps(100, 50);
    assert_eq!(t.len(), 51);
    assert_eq!((t[0], t[50]), (0, 100));
    assert!(t.windows(2).all(|w| w[1] == w[0] + 2));
}

#[test]
fn ddim_step_recovers_clean_latent_with_true_noise() {
    let s = Schedule::default();
    let z0 = [0.3, -1.2, 2.0];
    let eps = [0.5, 0.1, -0.7];
    let zt = forward_diffuse(&z0, 80, &eps, &s).unwrap();
    let back = ddim_step(&zt, &eps, s.alpha_bar(80), 1.0);
    for (a, b) in back.iter().zip(&z0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_starts_near_unit_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<TrainItem> = (0..64)
        .map(|_| TrainItem {
            z: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cond: conds(&mut rng, 0.5),
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let s = Schedule::default();
    let (m1, h1) = train_denoiser(DenoiserConfig::text(), &data, &s, &cfg).unwrap();
    let (m2, h2) = train_denoiser(DenoiserConfig::text(), &data, &s, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(h1.steps.len(), 8);
    assert!((h1.steps[0].2 - 1.0).abs() < 0.25);

    let mut csv = Vec::new();
    h1.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,step,loss\n"));
    assert_eq!(text.lines().count(), 9);

    let json = serde_json::to_string(&m1).unwrap();
    let back: Denoiser = serde_json::from_str(&json).unwrap();
    assert_eq!(back, m1);
    assert!(matches!(
        train_denoiser(DenoiserConfig::text(), &[], &s, &cfg),
        Err(DiffusionError::EmptyDataset)
    ));
}

#[test]
fn divergence_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut z = vec![0.0; 16];
    z[3] = f64::NAN;
    let data = vec![TrainItem {
        z,
        cond: conds(&mut rng, 0.5),
    }];
    let err = train_denoiser(DenoiserConfig::text(), &data, &Schedule::default(), &TrainConfig::default())
        .unwrap_err();
    assert!(matches!(err, DiffusionError::Diverged { epoch: 0, step: 0, .. }), "{err}");
}
