use hcvp::eval::{
    accuracy, check_leakage, domain_distance, embed, embeddings_csv, export_embeddings, inter_domain_distance,
    prompt_cluster_score, prompt_purity, purity, read_embeddings, unseen_accuracy, EmbeddingKind, DISTANCE_METRIC,
};
use hcvp::hpgn::FeatureExtractor;
use hcvp::model::{Method, Model};
use hcvp::synth::{generate, Dataset, Sample, SynthConfig};
use hcvp::trainer::{evaluate_model, TrainConfig, Trainer};
use hcvp::vit::VitConfig;
use hcvp::{Error, Exec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data() -> Dataset {
    generate(&SynthConfig {
        per_cell: 10,
        seed: 8,
        ..Default::default()
    })
    .unwrap()
}

fn hcvp_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = FeatureExtractor::new(&mut rng);
    ex.freeze();
    Model::hcvp(ex, VitConfig::default(), &mut rng).unwrap()
}

fn tiny(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        steps: 2,
        batch_size: 8,
        eval_every: 2,
        pretrain_steps: 2,
        vit: VitConfig {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[2], &[2]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 1, 1, 3], &[0, 1, 2, 2]).unwrap(), 0.5);
    assert!(matches!(accuracy(&[0, 1], &[0]), Err(Error::Shape(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 4000;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let acc = accuracy(&preds, &labels).unwrap();
    // three binomial standard deviations
    let sd = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() < 3.0 * sd, "{acc}");
}

#[test]
fn leakage_is_a_hard_error() {
    let d = data();
    let mut plan = hcvp::synth::make_splits(&d.samples, 3, 0).unwrap();
    assert!(check_leakage(&plan, &d).is_ok());
    plan.train.push(plan.test[0]);
    assert!(matches!(check_leakage(&plan, &d), Err(Error::Leakage(_))));
    let mut plan = hcvp::synth::make_splits(&d.samples, 3, 0).unwrap();
    plan.test.push(plan.val[0]);
    assert!(matches!(check_leakage(&plan, &d), Err(Error::Leakage(_))));
}

#[test]
fn distance_geometry() {
    // two domains at e1 and e2, scaled differently: normalization removes the scale
    let f = [3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.0];
    let r = domain_distance(&f, 3, &[0, 0, 1], &[0, 1, 0], &[0, 1]).unwrap();
    assert!((r.mean - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.metric, DISTANCE_METRIC);
    // class 0 has both domains, class 1 only one
    assert!((r.class_conditional_mean.unwrap() - 2f64.sqrt()).abs() < 1e-15);

    let same = vec![0.3, -0.2, 0.9].repeat(6);
    let r = domain_distance(&same, 3, &[0, 1, 2, 0, 1, 2], &[0; 6], &[0, 1, 2]).unwrap();
    assert_eq!(r.mean, 0.0);
    assert_eq!(r.pairs.len(), 3);

    assert!(matches!(domain_distance(&same, 3, &[0; 6], &[0; 6], &[0]), Err(Error::Config(_))));
    assert!(matches!(domain_distance(&same, 3, &[0; 6], &[0; 6], &[0, 1]), Err(Error::Config(_))));
    assert!(matches!(domain_distance(&same, 4, &[0; 6], &[0; 6], &[0, 1]), Err(Error::Shape(_))));
}

#[test]
fn purity_examples() {
    let mut codes = Vec::new();
    let mut keys = Vec::new();
    for i in 0..40 {
        let d = i % 4;
        let mut v = vec![0.0; 4];
        v[d] = 1.0;
        codes.extend(v);
        keys.push(d);
    }
    assert_eq!(purity(&codes, 4, &keys).unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 800;
    let random: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let keys: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let p = purity(&random, 8, &keys).unwrap();
    assert!((p - 0.25).abs() < 0.06, "{p}");

    // a tie resolves to the lower index
    let tie = [0.0, 1.0, -1.0];
    assert_eq!(purity(&tie, 1, &["a", "b", "a"]).unwrap(), 1.0 / 3.0);
    assert!(purity(&tie, 1, &["a"]).is_err());
    assert!(purity(&tie[..1], 1, &["a"]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_ignores_order(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), seed in any::<u64>()) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (sp, sl): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(accuracy(&p, &l).unwrap(), accuracy(&sp, &sl).unwrap());
    }

    #[test]
    fn distance_matrix_is_a_metric(seed in any::<u64>(), dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let f: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let domains: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let labels: Vec<usize> = (0..n).map(|i| i / 4 % 2).collect();
        let r = domain_distance(&f, dim, &domains, &labels, &[0, 1, 2, 3]).unwrap();
        prop_assert_eq!(r.pairs.len(), 6);
        for i in 0..4 {
            prop_assert_eq!(r.matrix[i][i], 0.0);
            for j in 0..4 {
                prop_assert_eq!(r.matrix[i][j], r.matrix[j][i]);
                prop_assert!(r.matrix[i][j] <= 2.0 + 1e-12);
                for k in 0..4 {
                    prop_assert!(r.matrix[i][k] <= r.matrix[i][j] + r.matrix[j][k] + 1e-12);
                }
            }
        }
        let again = domain_distance(&f.iter().map(|v| v * 7.5).collect::<Vec<_>>(), dim, &domains, &labels, &[0, 1, 2, 3]).unwrap();
        prop_assert!((again.mean - r.mean).abs() < 1e-12);
    }

    #[test]
    fn purity_is_a_fraction(seed in any::<u64>(), n in 2usize..40, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let p = purity(&v, 3, &keys).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p * n as f64 - (p * n as f64).round()).abs() < 1e-9);
    }
}

#[test]
fn embeddings_are_independent_of_chunking() {
    let d = data();
    let model = hcvp_model(3);
    let samples: Vec<&Sample> = d.samples.iter().take(70).collect();
    let all = embed(&model, &samples, Exec::default()).unwrap();
    assert_eq!(all.len(), 70);
    assert_eq!(all.x_n.len(), 70 * 64);
    let tail = embed(&model, &samples[60..], Exec::default()).unwrap();
    for (a, b) in all.x_n[60 * 64..].iter().zip(&tail.x_n) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(all.labels, samples.iter().map(|s| s.label).collect::<Vec<_>>());
    let dp = all.domain_prompts.as_ref().unwrap();
    assert_eq!(dp.len(), 70 * 64);
}

#[test]
fn embedding_export_shape_determinism_and_parse_back() {
    let d = data();
    let model = hcvp_model(4);
    let samples: Vec<&Sample> = d.samples.iter().step_by(7).collect();
    let dir = tempfile::tempdir().unwrap();
    for kind in [EmbeddingKind::XN, EmbeddingKind::DomainPrompt, EmbeddingKind::TaskPrompt] {
        let a = dir.path().join(format!("{kind:?}-a.csv"));
        let b = dir.path().join(format!("{kind:?}-b.csv"));
        let n = export_embeddings(&model, &samples, kind, &a, Exec::default()).unwrap();
        export_embeddings(&model, &samples, kind, &b, Exec::default()).unwrap();
        assert_eq!(n, samples.len());
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text, std::fs::read_to_string(&b).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), n + 1);
        assert!(lines.iter().all(|l| l.split(',').count() == 66));
        assert!(lines[0].starts_with("f0,f1,") && lines[0].ends_with(",f63,class,domain"));

        let table = read_embeddings(&a).unwrap();
        assert_eq!(table.dim, 64);
        assert_eq!(table.labels, samples.iter().map(|s| s.label).collect::<Vec<_>>());
        assert_eq!(table.domains, samples.iter().map(|s| s.domain).collect::<Vec<_>>());
        let e = embed(&model, &samples, Exec::default()).unwrap();
        let want = match kind {
            EmbeddingKind::XN => e.x_n,
            EmbeddingKind::DomainPrompt => e.domain_prompts.unwrap(),
            EmbeddingKind::TaskPrompt => e.task_prompts.unwrap(),
        };
        for (got, want) in table.rows.iter().zip(&want) {
            assert!((got - want).abs() <= 5e-9 * want.abs(), "{got} vs {want}");
        }
        // re-rendering the parsed table gives the same bytes
        let again = embeddings_csv(&table.rows, 64, &table.labels, &table.domains).unwrap();
        assert_eq!(again, text);
    }

    let missing = dir.path().join("no/such/dir/x.csv");
    assert!(matches!(
        export_embeddings(&model, &samples, EmbeddingKind::XN, &missing, Exec::default()),
        Err(Error::Io { .. })
    ));
    std::fs::write(dir.path().join("bad.csv"), "f0,class\n1,2\n").unwrap();
    assert!(matches!(read_embeddings(&dir.path().join("bad.csv")), Err(Error::Format { .. })));
    assert!("xn".parse::<EmbeddingKind>().is_ok());
    assert!("logits".parse::<EmbeddingKind>().is_err());
}

#[test]
fn baseline_has_nothing_to_cluster() {
    let d = data();
    let mut t = Trainer::new(&tiny(Method::Erm), &d).unwrap();
    t.train_step(&d).unwrap();
    let ckpt = t.checkpoint();
    assert!(matches!(prompt_cluster_score(&ckpt, &d, Exec::default()), Err(Error::NotApplicable(_))));
    let samples: Vec<&Sample> = d.samples.iter().take(8).collect();
    assert!(matches!(prompt_purity(&t.model, &samples, Exec::default()), Err(Error::NotApplicable(_))));
    let path = tempfile::tempdir().unwrap().path().join("p.csv");
    assert!(matches!(
        export_embeddings(&t.model, &samples, EmbeddingKind::DomainPrompt, &path, Exec::default()),
        Err(Error::NotApplicable(_))
    ));
}

#[test]
fn checkpoint_level_reports() {
    let d = data();
    let mut t = Trainer::new(&tiny(Method::Hcvp), &d).unwrap();
    t.train_step(&d).unwrap();
    let ckpt = t.checkpoint();

    let acc = unseen_accuracy(&ckpt, &d, 3, Exec::default()).unwrap();
    let direct = evaluate_model(&t.model, &d, &t.plan().test, Exec::default()).unwrap();
    assert_eq!(acc, direct.accuracy);
    assert_eq!(direct.samples, 40);
    assert!(matches!(unseen_accuracy(&ckpt, &d, 2, Exec::default()), Err(Error::Config(_))));

    let r = inter_domain_distance(&ckpt, &d, Exec::default()).unwrap();
    assert_eq!(r.domains, [0, 1, 2]);
    assert_eq!(r.pairs.len(), 3);
    assert_eq!(r.method.as_deref(), Some("hcvp"));
    let rec = r.record(1, "abc");
    assert_eq!(rec.extra["mean_distance"], serde_json::json!(r.mean));

    let score = prompt_cluster_score(&ckpt, &d, Exec::default()).unwrap();
    for p in [score.domain_purity, score.task_purity] {
        assert!((0.0..=1.0).contains(&p));
    }
}
