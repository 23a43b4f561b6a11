use rand::seq::SliceRandom;

use super::*;
use crate::model::HyperParams;
use crate::simenv::pd1;

fn small_model(n_items: usize) -> ModelParams<f32> {
    ModelParams::init(&HyperParams {
        d: 16,
        n_items,
        max_timesteps: 10,
        ..HyperParams::default()
    })
    .unwrap()
}

fn quick_cfg() -> ProbeConfig {
    ProbeConfig {
        users_per_group: 10,
        horizon: 4,
        epochs: 20,
        ..ProbeConfig::default()
    }
}

#[test]
fn sample_count_and_posteriors_match_a_replay() {
    let gm = pd1();
    let model = small_model(100);
    let samples = collect_probe_data(&model, &gm, 6, 5, 3).unwrap();
    assert_eq!(samples.len(), 4 * 6 * 5);
    for u in 0..24 {
        let mut rng = stream(3, u as u64);
        let user = sample_user(&gm, Some(u / 6), &mut rng).unwrap();
        let mut items: Vec<usize> = (0..100).collect();
        let (shown, _) = items.partial_shuffle(&mut rng, 5);
        let mut post = PosteriorState::new(&gm);
        for (t, &v) in shown.iter().enumerate() {
            post = posterior_update(&post, &gm, v, user.rating(v)).unwrap();
            let s = &samples[u * 5 + t];
            assert_eq!((s.user, s.t, s.true_group), (u, t + 1, u / 6));
            assert_eq!(s.activation.len(), 16);
            for (a, b) in s.true_posterior.iter().zip(post.probs()) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!((s.true_posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn first_pd1_observation_pins_the_group() {
    let samples = collect_probe_data(&small_model(100), &pd1(), 25, 1, 8).unwrap();
    let mut pinned = 0;
    for s in &samples {
        let top = argmax(&s.true_posterior);
        // Only an item from the user's own block is discriminative.
        if s.true_posterior[top] < 0.5 {
            continue;
        }
        pinned += 1;
        let rest: f64 = s.true_posterior.iter().sum::<f64>() - s.true_posterior[top];
        assert!(rest < 1e-20, "{:?}", s.true_posterior);
        assert_eq!(top, s.true_group);
    }
    assert!(pinned >= 10);
}

#[test]
fn activations_match_a_direct_forward_pass() {
    let gm = pd1();
    let model = small_model(100);
    let samples = collect_probe_data(&model, &gm, 3, 4, 5).unwrap();
    let s = &samples[7];
    let mut rng = stream(5, 1);
    let user = sample_user(&gm, Some(0), &mut rng).unwrap();
    let mut items: Vec<usize> = (0..100).collect();
    let (shown, _) = items.partial_shuffle(&mut rng, 4);
    let hist = InteractionHistory::from_pairs(shown.iter().map(|&v| (v, user.rating(v))).collect());
    let out = forward(&model, &[TokenSeq::from_history(&hist)]).unwrap();
    let row = &out.user_embeddings.data()[3 * 16..4 * 16];
    assert_eq!((s.user, s.t), (1, 4));
    for (a, b) in s.activation.iter().zip(row) {
        assert_eq!(*a, *b as f64);
    }
}

#[test]
fn collection_rejects_bad_horizons() {
    let model = small_model(100);
    assert!(collect_probe_data(&model, &pd1(), 2, 0, 1).is_err());
    assert!(collect_probe_data(&model, &pd1(), 2, 11, 1).is_err());
    assert!(collect_probe_data(&small_model(50), &pd1(), 2, 3, 1).is_err());
}

#[test]
fn split_is_stratified_and_disjoint() {
    let samples = collect_probe_data(&small_model(100), &pd1(), 10, 3, 2).unwrap();
    let (train, test) = split_by_user(&samples, 0.8, 2);
    assert_eq!(train.len() + test.len(), samples.len());
    for g in 0..4 {
        let users = |v: &[ProbeSample]| {
            let mut u: Vec<usize> = v.iter().filter(|s| s.true_group == g).map(|s| s.user).collect();
            u.dedup();
            u
        };
        let (a, b) = (users(&train), users(&test));
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(a.iter().all(|u| !b.contains(u)));
    }
}

fn synthetic(activation: impl Fn(usize) -> Vec<f64>, posterior: impl Fn(usize) -> Vec<f64>, n: usize) -> Vec<ProbeSample> {
    (0..n)
        .map(|i| ProbeSample {
            activation: activation(i),
            true_posterior: posterior(i),
            true_group: i % 3,
            t: 1 + i % 2,
            user: i,
        })
        .collect()
}

#[test]
fn constant_input_learns_the_mean_target() {
    let targets = [vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7], vec![0.4, 0.4, 0.2]];
    let samples = synthetic(|_| vec![0.5; 4], |i| targets[i % 3].clone(), 300);
    let cfg = ProbeConfig {
        hidden: 8,
        epochs: 60,
        lr: 1e-2,
        ..ProbeConfig::default()
    };
    let probe = train_probe(&samples, &cfg, 1).unwrap();
    let p = probe.predict(&[&[0.5; 4]]).unwrap().remove(0);
    for (a, b) in p.iter().zip([0.4, 0.8 / 3.0, 1.0 / 3.0]) {
        assert!((a - b).abs() < 0.02, "{p:?}");
    }
}

#[test]
fn separable_input_is_classified_perfectly() {
    let one_hot = |i: usize| {
        let mut v = vec![0.0; 3];
        v[i % 3] = 1.0;
        v
    };
    let samples = synthetic(one_hot, one_hot, 300);
    let cfg = ProbeConfig {
        hidden: 8,
        epochs: 40,
        lr: 1e-2,
        ..ProbeConfig::default()
    };
    let probe = train_probe(&samples, &cfg, 4).unwrap();
    for m in probe_metrics(&probe, &samples).unwrap() {
        assert_eq!(m.accuracy, 1.0);
        assert!(m.mae < 0.05);
    }
    for p in probe.predict(&[&[0.3, -2.0, 7.0]]).unwrap() {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn training_is_deterministic() {
    let samples = collect_probe_data(&small_model(100), &pd1(), 4, 3, 1).unwrap();
    let cfg = quick_cfg();
    assert_eq!(train_probe(&samples, &cfg, 9).unwrap(), train_probe(&samples, &cfg, 9).unwrap());
    assert!(train_probe(&[], &cfg, 9).is_err());
}

#[test]
fn exact_predictions_score_zero_error_and_ceiling_accuracy() {
    let samples = collect_probe_data(&small_model(100), &pd1(), 5, 4, 6).unwrap();
    let preds: Vec<Vec<f64>> = samples.iter().map(|s| s.true_posterior.clone()).collect();
    let metrics = score_predictions(&preds, &samples).unwrap();
    assert_eq!(metrics.len(), 4);
    for m in metrics {
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.accuracy, m.true_posterior_accuracy);
        assert_eq!(m.n, 20);
    }
    assert!(score_predictions(&preds[1..], &samples).is_err());
}

#[test]
fn report_csv_has_the_expected_columns() {
    let report = run_probe(&small_model(100), &pd1(), &quick_cfg(), 2).unwrap();
    assert_eq!(report.rows.len(), 4);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,mae_trained,mae_random,acc_probe,acc_true_posterior\n"));
    assert_eq!(text.lines().count(), 5);
}
