use diffitm::diffusion::train::{draw, example_draw, load_model, Noised, FINAL_FILE, LOG_FILE, STATE_FILE};
use diffitm::diffusion::{
    add_noise, diffusion_loss, make_schedule, train, Conditioning, Denoiser, DenoiserConfig, NoiseSchedule, TrainConfig,
};
use diffitm::numerics::finite_diff::numeric_param_grad;
use diffitm::numerics::{load_checkpoint, Tensor};
use diffitm::rng::{derive_rng, rng_from_seed};
use diffitm::scenegen::{build_dataset, render, sample_scene, CHANNELS, IMAGE_SIZE};

const IMG: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

fn noised(x0: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> diffitm::Result<Vec<f64>> {
    add_noise(&Tensor::from_vec(x0.to_vec()), &Tensor::from_vec(eps.to_vec()), t, s).map(Tensor::into_data)
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        time_features: 8,
        embed_dim: 8,
        groups: 2,
    }
}

#[test]
fn schedule_matches_direct_product() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 1000);
    let mut prod = 1.0;
    for t in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar[t] - prod).abs() < 1e-12, "t = {t}");
    }
    assert!(s.alpha_bar[999] < 0.01);
    assert_eq!(s.alpha_bar[0], 1.0 - 1e-4);
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn schedule_rejects_bad_ranges() {
    assert!(make_schedule(0, 1e-4, 0.02).is_err());
    assert!(make_schedule(10, 0.0, 0.02).is_err());
    assert!(make_schedule(10, 0.03, 0.02).is_err());
    assert!(make_schedule(10, 1e-4, 1.0).is_err());
}

#[test]
fn zero_noise_scales_the_image() {
    let s = NoiseSchedule::default();
    let x0 = render(&sample_scene(3), 3);
    let zeros = vec![0.0; IMG];
    for t in [0, 250, 999] {
        let x_t = noised(x0.data(), &zeros, t, &s).unwrap();
        let a = s.alpha_bar[t].sqrt();
        for (u, v) in x_t.iter().zip(x0.data()) {
            assert_eq!(*u, a * v);
        }
    }
    assert!(noised(x0.data(), &zeros[..10], 0, &s).is_err());
    assert!(noised(x0.data(), &zeros, 1000, &s).is_err());
}

#[test]
fn small_t_stays_close_to_the_image() {
    let s = NoiseSchedule::default();
    let x0 = render(&sample_scene(5), 5);
    let mut rng = rng_from_seed(1);
    let eps = Tensor::randn(&[IMG], 1.0, &mut rng).into_data();
    let x_t = noised(x0.data(), &eps, 0, &s).unwrap();
    let bound = (1.0 - s.alpha_bar[0]).sqrt() * eps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = x_t.iter().zip(x0.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(dev <= bound + (1.0 - s.alpha_bar[0].sqrt()));
}

#[test]
fn forward_moments_match_closed_form() {
    let s = NoiseSchedule::default();
    let mut rng = rng_from_seed(7);
    let x0 = vec![0.5; 4];
    for t in [10, 300, 700, 999] {
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let eps = Tensor::randn(&[4], 1.0, &mut rng).into_data();
            let x_t = noised(&x0, &eps, t, &s).unwrap();
            sum += x_t[0];
            sq += x_t[0] * x_t[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let want_mean = s.alpha_bar[t].sqrt() * 0.5;
        let want_var = 1.0 - s.alpha_bar[t];
        assert!((var / want_var - 1.0).abs() < 0.05, "t = {t}: var {var} vs {want_var}");
        let se = (want_var / n as f64).sqrt();
        assert!((mean - want_mean).abs() < 4.0 * se + 0.05 * want_mean.abs(), "t = {t}: mean {mean}");
    }
}

#[test]
fn conditioning_dropout_fraction() {
    let mut rng = rng_from_seed(11);
    let n = 20_000;
    let p = 0.1;
    let nulls = (0..n).filter(|_| draw(&mut rng, 1000, p).null).count();
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((nulls as f64 - n as f64 * p).abs() < 2.0 * sd, "{nulls} nulls");
    let mut rng = rng_from_seed(11);
    assert!((0..1000).all(|_| !draw(&mut rng, 1000, 0.0).null));
}

fn batch(n: usize, seed: u64) -> Vec<Noised> {
    let s = NoiseSchedule::default();
    (0..n as u64)
        .map(|i| {
            let scene = sample_scene(seed + i);
            let x0 = render(&scene, i);
            let d = example_draw(seed, 0, i, 1000, 0.1);
            let cond = Conditioning::caption(&diffitm::scenegen::caption_of(&scene)).unwrap();
            Noised::new(x0.data(), &d, cond, &s)
        })
        .collect()
}

#[test]
fn zero_output_loss_is_mean_squared_noise() {
    let mut model = Denoiser::init(DenoiserConfig::default(), 0).unwrap();
    for name in ["out.w", "out.b"] {
        model.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = batch(6, 3);
    let (loss, _) = diffusion_loss(&model, &b, 4, &|_| true).unwrap();
    let want: f64 = b
        .iter()
        .map(|n| n.eps.iter().map(|e| e * e).sum::<f64>() / IMG as f64)
        .sum::<f64>()
        / b.len() as f64;
    assert!((loss - want).abs() < 1e-12);
    assert!((loss - 1.0).abs() < 0.05);
}

#[test]
fn untrained_loss_is_near_noise_variance() {
    let model = Denoiser::init(DenoiserConfig::default(), 0).unwrap();
    let (loss, _) = diffusion_loss(&model, &batch(16, 9), 8, &|_| true).unwrap();
    assert!(loss.is_finite() && (0.8..1.3).contains(&loss), "{loss}");
}

#[test]
fn loss_does_not_depend_on_batch_order() {
    let model = Denoiser::init(DenoiserConfig::default(), 1).unwrap();
    let b = batch(8, 21);
    let mut rev = b.clone();
    rev.reverse();
    let (a, ga) = diffusion_loss(&model, &b, 8, &|_| true).unwrap();
    let (r, gr) = diffusion_loss(&model, &rev, 8, &|_| true).unwrap();
    assert!((a - r).abs() < 1e-12);
    for (k, g) in &ga {
        for (x, y) in g.data().iter().zip(gr[k].data()) {
            assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn sharding_changes_nothing_but_rounding() {
    let model = Denoiser::init(DenoiserConfig::default(), 2).unwrap();
    let b = batch(8, 4);
    let (a, _) = diffusion_loss(&model, &b, 8, &|_| true).unwrap();
    let (c, _) = diffusion_loss(&model, &b, 3, &|_| true).unwrap();
    assert!((a - c).abs() < 1e-12);
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let model = Denoiser::init(tiny(), 5).unwrap();
    let b = batch(2, 8);
    let ex: Vec<_> = b.iter().map(Noised::example).collect();
    let feeds = model.feeds(&ex);
    let inputs = feeds.as_inputs();
    let graph = model.graph();
    let loss = graph.output_id("loss").unwrap();
    let fwd = graph.forward(&model.params, &inputs).unwrap();
    let analytic = graph.backward(&fwd, loss).unwrap();
    for name in ["out.b", "mid.film.in.shift.b", "mid.film.out.scale.w", "text.fc1.b", "time.fc2.b", "enc1.b", "dec1.time.b"] {
        let n = numeric_param_grad(graph, &model.params, &inputs, loss, name, 1e-4).unwrap();
        let a = &analytic.params[name];
        for (x, y) in a.data().iter().zip(n.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-5);
            assert!(rel < 1e-4, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn seeded_backward_weights_examples() {
    let model = Denoiser::init(tiny(), 6).unwrap();
    let b = batch(3, 30);
    let ex: Vec<_> = b.iter().map(Noised::example).collect();
    let feeds = model.feeds(&ex);
    let graph = model.graph();
    let fwd = graph.forward(&model.params, &feeds.as_inputs()).unwrap();
    let err = graph.output_id("err").unwrap();
    let loss = graph.output_id("loss").unwrap();
    let seed = Tensor::from_vec(vec![1.0 / 3.0; 3]);
    let g1 = graph.backward_seeded(&fwd, err, &seed, |_| true).unwrap();
    let g2 = graph.backward(&fwd, loss).unwrap();
    for (k, g) in &g2.params {
        for (x, y) in g.data().iter().zip(g1.params[k].data()) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()), "{k}");
        }
    }
    assert!(graph.backward_seeded(&fwd, err, &Tensor::from_vec(vec![1.0; 2]), |_| true).is_err());
}

#[test]
fn denoise_is_deterministic() {
    let a = Denoiser::init(DenoiserConfig::default(), 3).unwrap();
    let b = Denoiser::init(DenoiserConfig::default(), 3).unwrap();
    let x0 = render(&sample_scene(1), 1);
    let w = Conditioning::text("a small red square").unwrap();
    let ya = a.denoise(x0.data(), 500, &w).unwrap();
    let yb = b.denoise(x0.data(), 500, &w).unwrap();
    assert_eq!(ya, yb);
    assert!(ya.iter().all(|v| v.is_finite()));
}

#[test]
fn null_conditioning_is_distinct_from_any_caption() {
    let w = Conditioning::text("a small red square").unwrap();
    assert_ne!(w.ids(), Conditioning::Null.ids());
    let mut enc_w = vec![0.0; diffitm::diffusion::text::TEXT_INPUT_DIM];
    let mut enc_n = enc_w.clone();
    w.encode_into(&mut enc_w);
    Conditioning::Null.encode_into(&mut enc_n);
    assert_ne!(enc_w, enc_n);
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        val_examples: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let ds = build_dataset(96, 32, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let outcome = train(&small_config(2), &ds, &a).unwrap();
    train(&small_config(1), &ds, &b).unwrap();
    std::fs::remove_file(b.join(FINAL_FILE)).unwrap();
    let resumed = train(&small_config(2), &ds, &b).unwrap();
    let fa = std::fs::read(a.join(FINAL_FILE)).unwrap();
    let fb = std::fs::read(b.join(FINAL_FILE)).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(outcome.log.len(), 2);
    assert_eq!(resumed.log.len(), 2);
    assert_eq!(outcome.log[1].val_loss, resumed.log[1].val_loss);
    assert!(a.join(STATE_FILE).exists());
    let log = std::fs::read_to_string(a.join(LOG_FILE)).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,wall_seconds\n"));
    let loaded = load_model(&a.join(FINAL_FILE), &DenoiserConfig::default()).unwrap();
    assert_eq!(loaded.params, outcome.model.params);
    let ckpt = load_checkpoint(&diffitm::diffusion::train::epoch_checkpoint(&a, 1)).unwrap();
    assert_eq!(ckpt.len(), outcome.model.params.len());
}

#[test]
fn validation_loss_falls_over_the_first_epochs() {
    let ds = build_dataset(320, 48, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&small_config(5), &ds, dir.path()).unwrap();
    let first = outcome.initial_val_loss;
    let last = outcome.log.last().unwrap().val_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(outcome.log[4].val_loss < outcome.log[0].val_loss);
}

#[test]
fn bad_configs_are_rejected() {
    let ds = build_dataset(8, 8, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        TrainConfig { lr: 0.0, ..small_config(1) },
        TrainConfig { p_uncond: 1.0, ..small_config(1) },
        TrainConfig { epochs: 0, ..small_config(1) },
    ] {
        assert!(train(&cfg, &ds, dir.path()).is_err());
    }
    let mut rng = derive_rng(0, "x", 0);
    let _ = draw(&mut rng, 10, 0.5);
}
