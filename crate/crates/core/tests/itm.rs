mod common;

use common::{ConstModel, Counting, HashModel};
use diffitm::diffusion::{Conditioning, Denoiser, DenoiserConfig, Example, NoiseSchedule};
use diffitm::itm::{
    class_posterior, conditional_error, image_retrieve_naive, image_retrieve_normalized, make_bank, score,
    text_retrieve, text_retrieve_graynorm, unconditional_error, DenoiserScorer, ErrorModel, GrayCache, NoiseBank,
    NoisePredictor, Ranking, ViaPredictor,
};
use diffitm::scenegen::{caption_of, render, sample_scene, ImageTensor};
use proptest::prelude::*;

fn bank(n: usize, seed: u64) -> NoiseBank {
    make_bank(n, seed, &NoiseSchedule::default()).unwrap()
}

fn images(n: u64) -> Vec<ImageTensor> {
    (0..n).map(|i| render(&sample_scene(100 + i), i)).collect()
}

fn captions(n: u64) -> Vec<Conditioning> {
    (0..n)
        .map(|i| Conditioning::caption(&caption_of(&sample_scene(200 + i))).unwrap())
        .collect()
}

#[test]
fn banks_are_nested_and_named() {
    let big = bank(100, 4);
    let small = bank(10, 4);
    assert_eq!(small.samples[..], big.samples[..10]);
    assert_eq!(big.prefix(10).unwrap(), small);
    assert_eq!(small.id(), "bank-n10-s4");
    assert_ne!(bank(10, 5).samples, small.samples);
    assert!(make_bank(0, 1, &NoiseSchedule::default()).is_err());
    assert!(big.prefix(0).is_err() && big.prefix(101).is_err());
}

#[test]
fn ranking_breaks_ties_by_index() {
    let r = Ranking::from_scores(vec![0.5, 0.2, 0.2, 0.9]);
    assert_eq!(r.order, vec![1, 2, 0, 3]);
    assert_eq!(r.top(), 1);
    assert_eq!(r.rank_of(3), 3);
    assert!(!r.degenerate);
    let flat = Ranking::from_scores(vec![1.0; 4]);
    assert!(flat.degenerate);
    assert_eq!(flat.top(), 0);
}

#[test]
fn retrieval_needs_two_candidates() {
    let m = HashModel { image_offset: 0.0 };
    let b = bank(3, 0);
    let x = images(1);
    let w = captions(1);
    assert!(text_retrieve(&m, &x[0], &w, &b).is_err());
    assert!(image_retrieve_naive(&m, &x, &w[0], &b).is_err());
    assert!(image_retrieve_normalized(&m, &x, &w[0], &b).is_err());
}

#[test]
fn score_record_is_conditional_minus_unconditional() {
    let m = HashModel { image_offset: 1.0 };
    let b = bank(8, 2);
    let x = &images(1)[0];
    let w = &captions(1)[0];
    let r = score(&m, x, w, &b).unwrap();
    assert_eq!(r.conditional, conditional_error(&m, x, w, &b).unwrap());
    assert_eq!(r.unconditional, unconditional_error(&m, x, &b).unwrap());
    assert_eq!(r.normalized, r.conditional - r.unconditional);
    assert_eq!(r.bank_id, b.id());
}

#[test]
fn per_image_offsets_leave_normalized_rankings_unchanged() {
    let b = bank(12, 9);
    let xs = images(6);
    for w in captions(5) {
        let plain = image_retrieve_normalized(&HashModel { image_offset: 0.0 }, &xs, &w, &b).unwrap();
        let shifted = image_retrieve_normalized(&HashModel { image_offset: 5.0 }, &xs, &w, &b).unwrap();
        assert_eq!(plain.order, shifted.order);
        for (p, s) in plain.scores.iter().zip(&shifted.scores) {
            assert!((p - s).abs() < 1e-9);
        }
    }
    let naive_plain = image_retrieve_naive(&HashModel { image_offset: 0.0 }, &xs, &captions(1)[0], &b).unwrap();
    let naive_shifted = image_retrieve_naive(&HashModel { image_offset: 5.0 }, &xs, &captions(1)[0], &b).unwrap();
    assert_ne!(naive_plain.order, naive_shifted.order);
}

#[test]
fn text_ranking_by_error_equals_ranking_by_normalized_score() {
    let m = HashModel { image_offset: 3.0 };
    let b = bank(10, 1);
    let ws = captions(4);
    for x in images(8) {
        let by_error = text_retrieve(&m, &x, &ws, &b).unwrap();
        let normalized: Vec<f64> = ws.iter().map(|w| score(&m, &x, w, &b).unwrap().normalized).collect();
        assert_eq!(by_error.order, Ranking::from_scores(normalized).order);
    }
}

#[test]
fn shared_banks_reduce_score_difference_variance() {
    let m = HashModel { image_offset: 0.0 };
    let x = &images(1)[0];
    let ws = captions(2);
    let banks: Vec<NoiseBank> = (0..100).map(|s| bank(5, 1000 + s)).collect();
    let err = |w: &Conditioning, b: &NoiseBank| conditional_error(&m, x, w, b).unwrap();
    let paired: Vec<f64> = banks[..50].iter().map(|b| err(&ws[0], b) - err(&ws[1], b)).collect();
    let unpaired: Vec<f64> = (0..50).map(|i| err(&ws[0], &banks[i]) - err(&ws[1], &banks[50 + i])).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&paired) < var(&unpaired), "{} vs {}", var(&paired), var(&unpaired));
}

#[test]
fn shared_banks_reduce_variance_for_the_denoiser() {
    let model = Denoiser::init(DenoiserConfig::default(), 0).unwrap();
    let m = DenoiserScorer::new(&model);
    let x = &images(1)[0];
    let ws = captions(2);
    let banks: Vec<NoiseBank> = (0..100).map(|s| bank(2, 5000 + s)).collect();
    let err = |w: &Conditioning, b: &NoiseBank| conditional_error(&m, x, w, b).unwrap();
    let paired: Vec<f64> = banks[..50].iter().map(|b| err(&ws[0], b) - err(&ws[1], b)).collect();
    let unpaired: Vec<f64> = (0..50).map(|i| err(&ws[0], &banks[i]) - err(&ws[1], &banks[50 + i])).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&paired) < var(&unpaired));
}

#[test]
fn denoiser_scorer_matches_one_by_one_evaluation() {
    let model = Denoiser::init(DenoiserConfig::default(), 2).unwrap();
    let b = bank(57, 3);
    let x = &images(1)[0];
    let w = &captions(1)[0];
    let batched = DenoiserScorer::new(&model).entry_errors(x, w, &b).unwrap();
    let s = NoiseSchedule::default();
    for (i, sample) in b.samples.iter().enumerate().step_by(7) {
        let x_t = s
            .add_noise(
                &diffitm::numerics::Tensor::from_vec(x.data().to_vec()),
                &diffitm::numerics::Tensor::from_vec(sample.eps.clone()),
                sample.t,
            )
            .unwrap();
        let one = model
            .errors(&[Example {
                x_t: x_t.data(),
                target: &sample.eps,
                t: sample.t,
                cond: w,
            }])
            .unwrap()[0];
        assert!((one - batched[i]).abs() < 1e-12);
    }
    assert_eq!(batched, DenoiserScorer::new(&model).entry_errors(x, w, &b).unwrap());
}

/// Predicts the noise as if the clean image were the caption's template.
struct Template {
    schedule: NoiseSchedule,
    templates: Vec<(Conditioning, Vec<f64>)>,
}

impl NoisePredictor for Template {
    fn predict(&self, x_t: &[f64], t: usize, cond: &Conditioning) -> diffitm::Result<Vec<f64>> {
        let (a, s) = self.schedule.coefficients(t);
        let tpl = self
            .templates
            .iter()
            .find(|(c, _)| c == cond)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| vec![0.0; x_t.len()]);
        Ok(x_t.iter().zip(&tpl).map(|(x, m)| 0.5 * (x - a * m) / s).collect())
    }
}

#[test]
fn template_predictor_retrieves_its_own_image() {
    let xs = images(4);
    let ws = captions(4);
    let schedule = NoiseSchedule::default();
    let model = ViaPredictor {
        predictor: Template {
            schedule: schedule.clone(),
            templates: ws.iter().cloned().zip(xs.iter().map(|x| x.data().to_vec())).collect(),
        },
        schedule,
    };
    let b = bank(20, 0);
    for (i, x) in xs.iter().enumerate() {
        assert_eq!(text_retrieve(&model, x, &ws, &b).unwrap().top(), i);
    }
    for (i, w) in ws.iter().enumerate() {
        assert_eq!(image_retrieve_normalized(&model, &xs, w, &b).unwrap().top(), i);
    }
}

#[test]
fn gray_terms_are_cached_per_caption_and_bank() {
    let m = Counting::new(HashModel { image_offset: 0.0 });
    let b = bank(4, 0);
    let ws = captions(3);
    let cache = GrayCache::new();
    for x in images(3) {
        text_retrieve_graynorm(&m, &x, &ws, &b, &cache).unwrap();
    }
    assert_eq!(cache.len(), 3);
    assert_eq!(m.calls(), 3 * 3 + 3);
    text_retrieve_graynorm(&m, &images(1)[0], &ws, &bank(5, 0), &cache).unwrap();
    assert_eq!(cache.len(), 6);
}

#[test]
fn constant_model_gives_degenerate_rankings() {
    let r = text_retrieve(&ConstModel, &images(1)[0], &captions(3), &bank(3, 0)).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.top(), 0);
}

proptest! {
    #[test]
    fn posterior_argmax_is_error_argmin(errors in prop::collection::vec(-50.0f64..50.0, 1..12), dup in any::<bool>()) {
        let mut errors = errors;
        if dup && errors.len() > 1 {
            errors[1] = errors[0];
        }
        let post = class_posterior(&errors);
        let total: f64 = post.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let argmax = post.iter().enumerate().fold(0, |b, (i, p)| if *p > post[b] { i } else { b });
        prop_assert_eq!(argmax, Ranking::from_scores(errors).top());
    }
}
