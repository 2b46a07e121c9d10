use advmm::data::{generate_synthetic, label_matrix, Domain, Sample, SynthSpec};
use advmm::eval::{prf1, recall_at_k, Direction, EmbeddingIndex, IndexRow, Metric};
use advmm::layers::{
    batchnorm_forward, fc_forward, grl_backward, l2norm_forward, relu_forward, sigmoid, sigmoid_xent,
    BatchNormParams, Mode,
};
use advmm::model::{Model, ModelConfig, Normalization};
use advmm::optim::{adam_step, AdamState, LambdaSchedule, NamedTensors};
use advmm::trainer::{train, TrainConfig, TrainMode};
use advmm::{Rng, Tensor};
use proptest::prelude::*;

fn gaussian(seed: u64, std: f64, shape: &[usize]) -> Tensor {
    Rng::new(seed).gaussian(0.0, std, shape).unwrap()
}

fn model_and_batch(seed: u64) -> (Model, Vec<Sample>) {
    let cfg = ModelConfig {
        d_image_in: 5,
        d_word: 3,
        max_len: 4,
        image_hidden: 6,
        embed_dim: 4,
        n_categories: 3,
        text_widths: vec![1, 2],
        text_filters: 3,
        head_hidden: 5,
        dropout: 0.0,
        image_norm: Normalization::Both,
        text_norm: Normalization::L2Norm,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(seed);
    let model = Model::new(cfg.clone(), &mut rng).unwrap();
    let batch = (0..6)
        .map(|i| {
            let domain = if i % 2 == 0 { Domain::Image } else { Domain::Text };
            let feature = match domain {
                Domain::Image => rng.gaussian(0.0, 1.0, &[cfg.d_image_in]).unwrap(),
                Domain::Text => rng.gaussian(0.0, 1.0, &[cfg.max_len, cfg.d_word]).unwrap(),
            };
            let mut labels = rng.bernoulli(0.5, &[cfg.n_categories]).unwrap();
            labels.data_mut()[i % cfg.n_categories] = 1.0;
            Sample {
                id: format!("s{i}"),
                domain,
                feature,
                labels,
                pair_id: None,
            }
        })
        .collect();
    (model, batch)
}

fn domain_column(batch: &[&Sample]) -> Tensor {
    Tensor::new(&[batch.len(), 1], batch.iter().map(|s| s.domain.target()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let mut a = Rng::new(seed);
        let mut b = Rng::new(seed);
        for _ in 0..10_000 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn reversal_twice_is_identity(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..8) {
        let dy = gaussian(seed, 5.0, &[rows, cols]);
        prop_assert_eq!(grl_backward(&grl_backward(&dy, 1.0), 1.0), dy);
    }

    #[test]
    fn l2norm_rows_are_unit(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..8, scale in 1e-3f64..1e3) {
        let x = gaussian(seed, scale, &[rows, cols]);
        let (y, _) = l2norm_forward(&x).unwrap();
        for i in 0..rows {
            let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized(seed in any::<u64>(), batch in 2usize..5, features in 1usize..8) {
        let x = Rng::new(seed).uniform(-3.0, 5.0, &[batch, features]).unwrap();
        let (y, _, _) = batchnorm_forward(&x, &BatchNormParams::new(features), Mode::Train).unwrap();
        for j in 0..features {
            let col: Vec<f64> = (0..batch).map(|i| y.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / batch as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / batch as f64;
            let xs: Vec<f64> = (0..batch).map(|i| x.row(i)[j]).collect();
            let xm = xs.iter().sum::<f64>() / batch as f64;
            let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / batch as f64;
            prop_assert!(mean.abs() <= 1e-10);
            // The epsilon inside the square root shrinks the variance by xv / (xv + eps).
            let want = xv / (xv + advmm::layers::BN_EPSILON);
            prop_assert!((var - want).abs() <= 1e-6, "var {var} want {want}");
        }
    }

    #[test]
    fn sigmoid_xent_is_finite(seed in any::<u64>(), n in 1usize..6, c in 1usize..6) {
        let mut rng = Rng::new(seed);
        let z = rng.uniform(-1e4, 1e4, &[n, c]).unwrap();
        let t = rng.bernoulli(0.5, &[n, c]).unwrap();
        let (loss, g) = sigmoid_xent(&z, &t).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn schedule_matches_logistic_form(p in 0.0f64..=1.0, gamma in 0.1f64..20.0) {
        let s = LambdaSchedule::new(gamma, 100);
        let v = s.at_progress(p);
        prop_assert!((v - (2.0 * sigmoid(gamma * p) - 1.0)).abs() <= 1e-15);
        prop_assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn schedule_strictly_increases(a in 1e-6f64..0.999, d in 1e-6f64..1e-3) {
        let s = LambdaSchedule::new(10.0, 100);
        let b = (a + d).min(1.0);
        prop_assert!(s.at_progress(b) > s.at_progress(a));
    }

    #[test]
    fn adam_first_step_is_about_lr(g in prop_oneof![1e-3f64..1e3, -1e3f64..-1e-3], lr in 1e-6f64..1e-1) {
        let mut w = NamedTensors(vec![("w".into(), Tensor::from_vec(vec![0.5]))]);
        let grad = NamedTensors(vec![("w".into(), Tensor::from_vec(vec![g]))]);
        let mut state = AdamState::new(lr);
        adam_step(&mut w, &grad, &mut state).unwrap();
        let step = (w.0[0].1.data()[0] - 0.5).abs();
        prop_assert!(step >= 0.9 * lr && step <= lr, "step {step} lr {lr}");
        prop_assert!((w.0[0].1.data()[0] - 0.5).signum() == -g.signum());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn joint_gradient_is_affine_in_lambda(seed in any::<u64>()) {
        let (model, batch) = model_and_batch(seed);
        let refs: Vec<&Sample> = batch.iter().collect();
        let ct = label_matrix(&refs, model.config.n_categories);
        let dt = domain_column(&refs);
        let out = model.forward(&refs, Mode::Train, &mut Rng::new(seed)).unwrap();
        let g = |l: f64| model.backward_joint(&out, &ct, &dt, l).unwrap();
        let (g0, g1, g2) = (g(0.0), g(1.0), g(2.0));
        for i in 0..g0.embedding.len() {
            let (a, b, c) = (g0.embedding.data()[i], g1.embedding.data()[i], g2.embedding.data()[i]);
            prop_assert!(((c - a) - 2.0 * (b - a)).abs() <= 1e-12);
        }
        // Domain head parameters sit above the reversal.
        prop_assert_eq!(&g0.params.domain, &g1.params.domain);
        prop_assert_eq!(&g0.params.category, &g2.params.category);
    }

    #[test]
    fn reversal_is_transparent_in_the_forward_pass(seed in any::<u64>()) {
        let (model, batch) = model_and_batch(seed);
        let refs: Vec<&Sample> = batch.iter().collect();
        let out = model.forward(&refs, Mode::Eval, &mut Rng::new(seed)).unwrap();
        let head = model.params.domain.as_ref().unwrap();
        let (h, _) = fc_forward(&out.embedding, &head.hidden).unwrap();
        let (h, _) = relu_forward(&h);
        let (logits, _) = fc_forward(&h, &head.out).unwrap();
        prop_assert_eq!(Some(logits), out.domain_logits);
    }

    #[test]
    fn synthetic_pairs_share_labels(seed in any::<u64>(), z in 1usize..6, c in 1usize..5, pairs in 1usize..20) {
        let spec = SynthSpec {
            latent_dim: z,
            n_categories: c,
            n_pairs: pairs,
            d_image: 4,
            d_word: 3,
            min_len: 1,
            max_len: 4,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec, &mut Rng::new(seed)).unwrap();
        for split in [&data.train, &data.test] {
            for pair in split.chunks(2) {
                prop_assert_eq!(pair[0].domain, Domain::Image);
                prop_assert_eq!(pair[1].domain, Domain::Text);
                prop_assert_eq!(&pair[0].labels, &pair[1].labels);
                prop_assert_eq!(&pair[0].pair_id, &pair[1].pair_id);
                prop_assert!(pair[0].labels.sum() >= 1.0);
                prop_assert_eq!(pair[1].feature.shape(), &[4, 3]);
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), pairs in 2usize..30, dim in 1usize..5) {
        let mut rng = Rng::new(seed);
        let rows = (0..pairs)
            .flat_map(|i| [Domain::Image, Domain::Text].map(|d| (i, d)))
            .map(|(i, domain)| IndexRow {
                id: format!("{domain}-{i}"),
                domain,
                pair_id: Some(format!("p{i}")),
                embedding: rng.gaussian(0.0, 1.0, &[dim]).unwrap().data().to_vec(),
            })
            .collect();
        let index = EmbeddingIndex::new(rows, Metric::Euclidean).unwrap();
        let ks: Vec<usize> = (1..=pairs).collect();
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            let r = recall_at_k(&index, &ks, dir);
            prop_assert!(r.recall.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*r.recall.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn restricted_search_stays_in_domain(seed in any::<u64>(), n in 2usize..30, k in 1usize..10) {
        let mut rng = Rng::new(seed);
        let rows: Vec<IndexRow> = (0..n)
            .map(|i| IndexRow {
                id: format!("r{i}"),
                domain: if rng.next_f64() < 0.5 { Domain::Image } else { Domain::Text },
                pair_id: None,
                embedding: rng.gaussian(0.0, 1.0, &[3]).unwrap().data().to_vec(),
            })
            .collect();
        let texts = rows.iter().filter(|r| r.domain == Domain::Text).count();
        let index = EmbeddingIndex::new(rows, Metric::Cosine).unwrap();
        let q = rng.gaussian(0.0, 1.0, &[3]).unwrap();
        match index.knn_search(q.data(), k, Some(Domain::Text)) {
            Ok(found) => {
                prop_assert_eq!(found.len(), k);
                for f in found {
                    let row = index.rows().iter().find(|r| r.id == f.id).unwrap();
                    prop_assert_eq!(row.domain, Domain::Text);
                }
            }
            Err(_) => prop_assert!(k > texts),
        }
    }

    #[test]
    fn micro_f1_matches_pooled_counts(seed in any::<u64>(), n in 1usize..20, c in 1usize..6) {
        let mut rng = Rng::new(seed);
        let logits = rng.gaussian(0.0, 2.0, &[n, c]).unwrap();
        let targets = rng.bernoulli(0.4, &[n, c]).unwrap();
        let m = prf1(&logits, &targets, 0.5).unwrap();
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&z, &t) in logits.data().iter().zip(targets.data()) {
            let pred = 1.0 / (1.0 + (-z).exp()) >= 0.5;
            match (pred, t == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let want = if tp + fp + fneg == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        prop_assert!((m.micro.f1 - want).abs() <= 1e-12, "{} vs {want}", m.micro.f1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn logged_lambda_follows_the_schedule(seed in 0u64..1000, max_steps in 4u64..20, every in 1u64..5) {
        let spec = SynthSpec {
            latent_dim: 3,
            n_categories: 2,
            n_pairs: 40,
            d_image: 4,
            d_word: 3,
            min_len: 2,
            max_len: 3,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec, &mut Rng::new(seed)).unwrap();
        let mc = ModelConfig {
            d_image_in: 4,
            d_word: 3,
            max_len: 3,
            image_hidden: 4,
            embed_dim: 3,
            n_categories: 2,
            text_widths: vec![1, 2],
            text_filters: 2,
            head_hidden: 3,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            mode: TrainMode::Adversarial,
            max_steps,
            batch_size: 8,
            seed,
            eval_every: every,
            eval_samples: 16,
            ..TrainConfig::default()
        };
        let ckpt = train(&tc, &mc, &data).unwrap();
        let schedule = LambdaSchedule::new(tc.gamma, max_steps);
        for r in &ckpt.history {
            prop_assert_eq!(r.lambda.to_bits(), schedule.at_progress(r.step as f64 / max_steps as f64).to_bits());
        }
        prop_assert_eq!(ckpt.history.last().unwrap().step, max_steps);
    }
}
