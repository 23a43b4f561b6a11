use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{build, loss};
use super::*;
use crate::diffcore::{forward_backward, Graph, ParamSet};
use crate::simenv::{gen_offline_dataset, make_pd1, InteractionHistory};

fn tiny_hp(n_items: usize) -> HyperParams {
    HyperParams {
        d: 8,
        n_blocks: 2,
        n_heads: 2,
        n_items,
        max_timesteps: 6,
        batch_size: 4,
        init_std: 0.5,
        ..HyperParams::default()
    }
}

fn random_seqs(rng: &mut ChaCha8Rng, n: usize, steps: usize, n_items: usize, target: bool) -> Vec<TokenSeq> {
    (0..n)
        .map(|_| {
            let mut items: Vec<usize> = (0..n_items).collect();
            let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(&mut items[..], rng, steps);
            let items = chosen.to_vec();
            let mut ratings: Vec<f64> = (0..steps).map(|_| rng.random_range(1.0..5.0)).collect();
            if target {
                ratings.push(5.0);
            }
            TokenSeq::new(ratings, items).unwrap()
        })
        .collect()
}

fn graph_loss(params: &ModelParams<f64>, seqs: &[TokenSeq]) -> f64 {
    let mut g = Graph::new();
    let p = g.params(&params.tensors);
    let built = build(&mut g, &p, &params.hp, &params.layout(), seqs, None).unwrap();
    let l = loss(&mut g, &built, seqs, params.hp.bottleneck_enabled).unwrap();
    g.scalar(l)
}

#[test]
fn tokenize_lengths_and_order() {
    let hp = HyperParams::default();
    let empty = tokenize(&InteractionHistory::new(), 5.0, &hp).unwrap();
    assert_eq!(empty.len(), 1);
    assert_eq!(empty.token(0), Token::Rating { value: 5.0, step: 0 });

    let h = InteractionHistory::from_pairs(vec![(3, 4.5)]);
    let toks: Vec<Token> = tokenize(&h, 5.0, &hp).unwrap().tokens().collect();
    assert_eq!(
        toks,
        vec![
            Token::Rating { value: 4.5, step: 0 },
            Token::Item { id: 3, step: 0 },
            Token::Rating { value: 5.0, step: 1 },
        ]
    );
    for t in 0..49 {
        let h = InteractionHistory::from_pairs((0..t).map(|v| (v, 3.0)).collect());
        assert_eq!(tokenize(&h, 5.0, &hp).unwrap().len(), 2 * t + 1);
    }
    let bad = InteractionHistory::from_pairs(vec![(100, 1.0)]);
    assert!(tokenize(&bad, 5.0, &hp).is_err());
    let long = InteractionHistory::from_pairs((0..50).map(|v| (v, 3.0)).collect());
    assert!(tokenize(&long, 5.0, &hp).is_err());
}

#[test]
fn causal_masking_hides_future_tokens() {
    let hp = HyperParams {
        d: 32,
        n_items: 20,
        max_timesteps: 10,
        ..HyperParams::default()
    };
    let params = ModelParams::<f32>::init(&hp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = random_seqs(&mut rng, 1, 6, 20, true).remove(0);
    let out = forward(&params, &[base.clone()]).unwrap();
    for j in 1..base.len() {
        let mut ratings = base.ratings().to_vec();
        let mut items = base.items().to_vec();
        if j % 2 == 0 {
            ratings[j / 2] += 1.7;
        } else {
            items[j / 2] = (items[j / 2] + 7) % 20;
        }
        let changed = TokenSeq::new(ratings, items).unwrap();
        let out2 = forward(&params, &[changed]).unwrap();
        // Rating token k sits at position 2k; item token k at 2k + 1.
        for k in 0..base.ratings().len() {
            if 2 * k < j {
                let n = hp.n_items;
                for (a, b) in out.item_logits.data()[k * n..(k + 1) * n]
                    .iter()
                    .zip(&out2.item_logits.data()[k * n..(k + 1) * n])
                {
                    assert!((a - b).abs() < 1e-6, "rating token {k} moved after perturbing {j}");
                }
            }
        }
        for k in 0..base.items().len() {
            if 2 * k + 1 < j {
                let d = hp.d;
                for (a, b) in out.user_embeddings.data()[k * d..(k + 1) * d]
                    .iter()
                    .zip(&out2.user_embeddings.data()[k * d..(k + 1) * d])
                {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn distributions_are_normalized() {
    let hp = HyperParams {
        d: 16,
        n_items: 30,
        max_timesteps: 8,
        ..HyperParams::default()
    };
    let params = ModelParams::<f32>::init(&hp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for steps in 0..5 {
        let prompts = random_seqs(&mut rng, 3, steps, 30, true);
        for dist in next_item_dist(&params, &prompts).unwrap() {
            let s: f64 = dist.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn single_token_depends_only_on_target() {
    let hp = HyperParams {
        d: 16,
        n_items: 10,
        ..HyperParams::default()
    };
    let params = ModelParams::<f32>::init(&hp).unwrap();
    let h = InteractionHistory::new();
    let a = next_item_dist(&params, &[tokenize(&h, 5.0, &hp).unwrap()]).unwrap();
    let b = next_item_dist(&params, &[tokenize(&h, 5.0, &hp).unwrap()]).unwrap();
    let c = next_item_dist(&params, &[tokenize(&h, 1.0, &hp).unwrap()]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn batched_forward_matches_single() {
    let hp = HyperParams {
        d: 16,
        n_items: 10,
        max_timesteps: 8,
        ..HyperParams::default()
    };
    let params = ModelParams::<f64>::init(&hp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs = random_seqs(&mut rng, 4, 5, 10, true);
    let all = next_item_dist(&params, &seqs).unwrap();
    for (s, d) in seqs.iter().zip(&all) {
        let one = next_item_dist(&params, std::slice::from_ref(s)).unwrap();
        for (a, b) in one[0].iter().zip(d) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for bottleneck in [true, false] {
        let hp = HyperParams {
            bottleneck_enabled: bottleneck,
            ..tiny_hp(6)
        };
        let params = ModelParams::<f64>::init(&hp).unwrap();
        let seqs = random_seqs(&mut rng, 3, 4, 6, false);
        let out = forward(&params, &seqs).unwrap();
        // Independent recomputation with explicit loops.
        let (n, d) = (hp.n_items, hp.d);
        let mut ce = 0.0;
        let mut se = 0.0;
        for (b, s) in seqs.iter().enumerate() {
            for i in 0..4 {
                let row = &out.item_logits.data()[(b * 4 + i) * n..(b * 4 + i + 1) * n];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                ce -= (row[s.items()[i]].exp() / z).ln();
            }
            for i in 1..4 {
                let sh = &out.user_embeddings.data()[(b * 4 + i - 1) * d..(b * 4 + i) * d];
                let emb = params.get("item_embedding").unwrap().row(s.items()[i]);
                let pred: f64 = sh.iter().zip(emb).map(|(a, b)| a * b).sum();
                se += (pred - s.ratings()[i]).powi(2);
            }
        }
        let expect = ce / 12.0 + if bottleneck { se / 9.0 } else { 0.0 };
        let got = sequence_loss(&out, &seqs, bottleneck).unwrap();
        assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        let g = graph_loss(&params, &seqs);
        assert!((g - expect).abs() <= 1e-6 * expect.abs().max(1.0));
    }
}

#[test]
fn loss_edge_cases() {
    let hp = tiny_hp(5);
    let mut params = ModelParams::<f64>::init(&hp).unwrap();
    // A zero decoder gives uniform logits: cross-entropy = ln(n_items).
    let dec = params.tensors.index_of("decoder").unwrap();
    params.tensors.get_mut(dec).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs = random_seqs(&mut rng, 2, 3, 5, false);
    let out = forward(&params, &seqs).unwrap();
    let ce = sequence_loss(&out, &seqs, false).unwrap();
    assert!((ce - 5f64.ln()).abs() < 1e-12);
    assert!(sequence_loss(&out, &seqs[..1], false).is_err());
}

#[test]
fn rating_prediction_is_plain_dot_product() {
    let hp = tiny_hp(7);
    let params = ModelParams::<f32>::init(&hp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs = random_seqs(&mut rng, 2, 5, 7, false);
    let out = forward(&params, &seqs).unwrap();
    let emb = params.get("item_embedding").unwrap();
    for (b, s) in seqs.iter().enumerate() {
        for i in 0..4 {
            let sh = &out.user_embeddings.data()[(b * 5 + i) * 8..(b * 5 + i + 1) * 8];
            let dot: f64 = sh
                .iter()
                .zip(emb.row(s.items()[i + 1]))
                .map(|(a, e)| *a as f64 * *e as f64)
                .sum();
            assert!((out.rating_preds.data()[b * 4 + i] as f64 - dot).abs() < 1e-6);
        }
    }
}

#[test]
fn item_relabeling_permutes_logits() {
    let hp = tiny_hp(6);
    let params = ModelParams::<f64>::init(&hp).unwrap();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut permuted = params.clone();
    for name in ["item_embedding", "decoder"] {
        let i = permuted.tensors.index_of(name).unwrap();
        let src = params.tensors.get(i).clone();
        let dst = permuted.tensors.get_mut(i).data_mut();
        for (v, &pv) in perm.iter().enumerate() {
            dst[pv * 8..(pv + 1) * 8].copy_from_slice(src.row(v));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seqs = random_seqs(&mut rng, 2, 3, 6, true);
    let relabeled: Vec<TokenSeq> = seqs
        .iter()
        .map(|s| TokenSeq::new(s.ratings().to_vec(), s.items().iter().map(|&v| perm[v]).collect()).unwrap())
        .collect();
    let a = forward(&params, &seqs).unwrap();
    let b = forward(&permuted, &relabeled).unwrap();
    let rows = a.item_logits.numel() / 6;
    for r in 0..rows {
        for v in 0..6 {
            let x = a.item_logits.data()[r * 6 + v];
            let y = b.item_logits.data()[r * 6 + perm[v]];
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn appending_tokens_matches_recomputation() {
    let hp = tiny_hp(6);
    let params = ModelParams::<f32>::init(&hp).unwrap();
    let h = InteractionHistory::from_pairs(vec![(1, 4.0), (4, 2.0)]);
    let mut longer = h.clone();
    longer.push(0, 3.5);
    let short = forward(&params, &[tokenize(&h, 5.0, &hp).unwrap()]).unwrap();
    let long_prompt = TokenSeq::new(vec![4.0, 2.0, 5.0, 5.0], vec![1, 4, 0]).unwrap();
    let long = forward(&params, &[long_prompt]).unwrap();
    // The shared prefix (through the target token of the short prompt,
    // here carrying the same value) is unchanged.
    for (a, b) in short.item_logits.data().iter().zip(long.item_logits.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let again = next_item_dist(&params, &[tokenize(&longer, 5.0, &hp).unwrap()]).unwrap();
    let fresh = next_item_dist(&params.clone(), &[tokenize(&longer, 5.0, &hp).unwrap()]).unwrap();
    assert_eq!(again, fresh);
}

/// Fourth-order central differences of the full loss wrt every
/// parameter, in f64. Returns the worst relative error.
fn gradient_check(hp: &HyperParams, seqs: &[TokenSeq]) -> f64 {
    let params = ModelParams::<f64>::init(hp).unwrap();
    let lay = params.layout();
    let (_, grads) = forward_backward(&params.tensors, |g, p| {
        let built = build(g, p, hp, &lay, seqs, None)?;
        loss(g, &built, seqs, hp.bottleneck_enabled)
    })
    .unwrap();
    let h = 3e-4;
    let at = |i: usize, j: usize, dx: f64| {
        let mut p = params.clone();
        p.tensors.get_mut(i).data_mut()[j] += dx;
        graph_loss(&p, seqs)
    };
    let mut worst = 0.0f64;
    for i in 0..params.tensors.len() {
        for j in 0..params.tensors.get(i).numel() {
            let fd = (8.0 * (at(i, j, h) - at(i, j, -h)) - (at(i, j, 2.0 * h) - at(i, j, -2.0 * h)))
                / (12.0 * h);
            let an = grads.get(i).data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layernorm in [false, true] {
        let hp = HyperParams {
            layernorm_enabled: layernorm,
            init_std: 0.2,
            ..tiny_hp(4)
        };
        let seqs = random_seqs(&mut rng, 2, 3, 4, false);
        let err = gradient_check(&hp, &seqs);
        assert!(err < 1e-4, "layernorm={layernorm}: max relative error {err}");
    }
}

fn fixture(n: usize, steps: usize, n_items: usize) -> Vec<TokenSeq> {
    let gm = make_pd1(4, n_items / 4, 5.0, 1.0, 0.25).unwrap();
    let (data, _) = gen_offline_dataset(&gm, n / 4, steps, 11).unwrap();
    data.sequences.iter().map(TokenSeq::from_history).collect()
}

#[test]
fn overfits_eight_sequences() {
    let hp = HyperParams {
        d: 64,
        n_items: 20,
        max_timesteps: 5,
        lr: 3e-3,
        ..HyperParams::default()
    };
    let seqs = fixture(8, 5, 20);
    let (_, initial, last) = overfit(&hp, &seqs, 200).unwrap();
    assert!(last < 0.1 * initial, "loss {initial} -> {last}");
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let gm = make_pd1(4, 5, 5.0, 1.0, 0.25).unwrap();
    let (data, _) = gen_offline_dataset(&gm, 10, 6, 3).unwrap();
    let hp = HyperParams {
        d: 16,
        n_items: 20,
        max_timesteps: 6,
        epochs: 3,
        batch_size: 8,
        ..HyperParams::default()
    };
    let (p1, log1) = train_model(&data, &hp).unwrap();
    let (p2, log2) = train_model(&data, &hp).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(log1.to_csv(), log2.to_csv());
    assert_eq!(log1.epochs.len(), 4);
    assert_eq!((log1.n_train, log1.n_val), (36, 4));
    let (_, val) = split_indices(data.len(), hp.val_fraction, hp.seed);
    let val: Vec<TokenSeq> = val.iter().map(|&i| TokenSeq::from_history(&data.sequences[i])).collect();
    let best = evaluate_loss(&p1, &val).unwrap();
    assert!((best - log1.best_val_loss()).abs() < 1e-9);
    assert_eq!(log1.epochs[log1.best_epoch].val_loss, log1.best_val_loss());

    let zero = HyperParams { epochs: 0, ..hp };
    let (p0, log0) = train_model(&data, &zero).unwrap();
    assert_eq!(p0, ModelParams::init(&zero).unwrap());
    assert_eq!(log0.epochs.len(), 1);
}

#[test]
fn diverging_training_names_epoch_and_batch() {
    let gm = make_pd1(4, 5, 5.0, 1.0, 0.25).unwrap();
    let (mut data, _) = gen_offline_dataset(&gm, 10, 6, 3).unwrap();
    let hp = HyperParams {
        d: 16,
        n_items: 20,
        max_timesteps: 6,
        epochs: 2,
        batch_size: 40,
        ..HyperParams::default()
    };
    let (train, _) = split_indices(data.len(), hp.val_fraction, hp.seed);
    let bad = train[0];
    data.sequences[bad] = InteractionHistory::from_pairs(
        data.sequences[bad].pairs().iter().map(|&(v, _)| (v, 1e30)).collect(),
    );
    let err = train_model(&data, &hp).unwrap_err();
    assert!(matches!(err, crate::Error::NanLoss { epoch: 1, batch: 0 }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let hp = HyperParams {
        layernorm_enabled: true,
        ..tiny_hp(9)
    };
    let mut params = ModelParams::<f32>::init(&hp).unwrap();
    params.tensors.get_mut(0).data_mut()[0] = f32::MIN_POSITIVE / 4.0;
    let bytes = to_bytes(&params).unwrap();
    assert_eq!(&bytes[..7], b"RLT4REC");
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back.hp, params.hp);
    for (a, b) in params.tensors.tensors().iter().zip(back.tensors.tensors()) {
        let ab: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
        let bb: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    let prompt = TokenSeq::new(vec![3.0, 5.0], vec![2]).unwrap();
    assert_eq!(
        next_item_dist(&params, std::slice::from_ref(&prompt)).unwrap(),
        next_item_dist(&back, &[prompt]).unwrap()
    );
    assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(from_bytes(&bad).is_err());
}

#[test]
fn shape_mismatch_in_checkpoint_is_rejected() {
    let hp = tiny_hp(4);
    let mut params = ModelParams::<f32>::init(&hp).unwrap();
    let mut tensors = ParamSet::new();
    for (name, t) in params.tensors.iter() {
        tensors.push(name, t.clone());
    }
    tensors.push("extra", crate::diffcore::Tensor::zeros(&[1]));
    params.tensors = tensors;
    let bytes = to_bytes(&params).unwrap();
    assert!(from_bytes(&bytes).is_err());
}

#[test]
fn single_and_double_precision_gradients_agree() {
    let hp = HyperParams {
        d: 32,
        n_items: 40,
        max_timesteps: 12,
        ..HyperParams::default()
    };
    let seqs = random_seqs(&mut ChaCha8Rng::seed_from_u64(12), 16, 12, 40, false);
    let p64 = ModelParams::<f64>::init(&hp).unwrap();
    let p32: ModelParams<f32> = p64.cast();
    let lay = p64.layout();
    let (l64, g64) = forward_backward(&p64.tensors, |g, p| {
        let built = build(g, p, &hp, &lay, &seqs, None)?;
        loss(g, &built, &seqs, true)
    })
    .unwrap();
    let (l32, g32) = forward_backward(&p32.tensors, |g, p| {
        let built = build(g, p, &hp, &lay, &seqs, None)?;
        loss(g, &built, &seqs, true)
    })
    .unwrap();
    assert!((l64 - l32 as f64).abs() < 1e-4 * l64.abs());
    for i in 0..g64.len() {
        let (a, b) = (g64.get(i), g32.get(i));
        let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - *y as f64).abs() <= 1e-3 * scale + 1e-7, "{}: {x} vs {y}", g64.name(i));
        }
    }
}
