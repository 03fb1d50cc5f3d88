use hcvp::losses::{self, oracle, LossParts, LossWeights, SimilarityConfig};
use hcvp::{Error, Graph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat(rows: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (vec![rows.len(), rows[0].len()], rows.concat())
}

fn eval(rows: &[Vec<f64>], f: impl FnOnce(&mut Graph, hcvp::Var) -> losses::Contrastive) -> (f64, bool) {
    let mut g = Graph::new();
    let (shape, data) = flat(rows);
    let z = g.constant(&shape, data).unwrap();
    let c = f(&mut g, z);
    (g.scalar_value(c.loss), c.degenerate)
}

fn domain_loss(rows: &[Vec<f64>], domains: &[usize], cfg: SimilarityConfig) -> (f64, bool) {
    eval(rows, |g, z| losses::pcl_domain(g, z, domains, &cfg).unwrap())
}

fn task_loss(rows: &[Vec<f64>], labels: &[usize], domains: &[usize], cfg: SimilarityConfig) -> (f64, bool) {
    eval(rows, |g, z| losses::pcl_task(g, z, labels, domains, &cfg).unwrap())
}

fn cci_loss(rows: &[Vec<f64>], labels: &[usize], cfg: SimilarityConfig) -> (f64, bool) {
    eval(rows, |g, z| losses::cci(g, z, labels, &cfg).unwrap())
}

fn cls(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let (shape, data) = flat(rows);
    let z = g.constant(&shape, data).unwrap();
    let l = losses::cls_loss(&mut g, z, labels).unwrap();
    g.scalar_value(l)
}

const RAW_TAU1: SimilarityConfig = SimilarityConfig {
    temperature: 1.0,
    normalize: false,
};

fn hand_rows() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]
}

#[test]
fn identical_prompts_give_log_b_minus_one() {
    let rows = vec![vec![0.3, -0.2, 0.9]; 4];
    for cfg in [SimilarityConfig::default(), RAW_TAU1] {
        let (l, _) = domain_loss(&rows, &[0, 0, 1, 1], cfg);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let (l, _) = task_loss(&rows, &[0, 0, 1, 1], &[0, 0, 0, 0], cfg);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let (l, _) = cci_loss(&rows, &[2, 2, 2, 1], cfg);
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn hand_cases_match_the_oracle() {
    let rows = hand_rows();
    let (l, _) = domain_loss(&rows, &[0, 0, 1, 1], RAW_TAU1);
    assert!((l - oracle::pcl_domain(&rows, &[0, 0, 1, 1], &RAW_TAU1).unwrap()).abs() < 1e-9);
    // exp(1) / (exp(1) + 2) for every anchor.
    assert!((l + (1f64.exp() / (1f64.exp() + 2.0)).ln()).abs() < 1e-12);

    let (l, _) = task_loss(&rows, &[0, 0, 1, 1], &[0, 0, 0, 0], RAW_TAU1);
    assert!((l - oracle::pcl_task(&rows, &[0, 0, 1, 1], &[0, 0, 0, 0], &RAW_TAU1).unwrap()).abs() < 1e-9);

    let cfg = SimilarityConfig {
        temperature: 0.5,
        normalize: false,
    };
    let (l, _) = cci_loss(&rows, &[0, 0, 1, 1], cfg);
    assert!((l - oracle::cci(&rows, &[0, 0, 1, 1], &cfg).unwrap()).abs() < 1e-9);
}

#[test]
fn empty_positive_sets_are_degenerate() {
    let rows = hand_rows();
    let (l, deg) = domain_loss(&rows, &[0, 1, 2, 3], SimilarityConfig::default());
    assert!(deg && l == 0.0);
    let (l, deg) = task_loss(&rows, &[0, 1, 2, 3], &[0, 0, 0, 0], SimilarityConfig::default());
    assert!(deg && l == 0.0);
    assert!(oracle::pcl_domain(&rows, &[0, 1, 2, 3], &SimilarityConfig::default()).is_none());

    let mut g = Graph::new();
    let z = g.constant(&[4, 2], rows.concat()).unwrap();
    let out = losses::pcl_total(&mut g, z, z, &[0, 1, 2, 3], &[0, 1, 2, 3], &SimilarityConfig::default()).unwrap();
    assert!(out.domain.degenerate && out.task.degenerate);
    assert_eq!(g.scalar_value(out.loss), 0.0);
    g.backward(out.loss).unwrap();
}

#[test]
fn partial_anchor_sets_average_over_valid_anchors() {
    let rows = vec![vec![1.0, 0.2], vec![0.5, 0.9], vec![-0.3, 0.4]];
    let mut g = Graph::new();
    let z = g.constant(&[3, 2], rows.concat()).unwrap();
    let c = losses::pcl_domain(&mut g, z, &[0, 0, 1], &SimilarityConfig::default()).unwrap();
    assert_eq!(c.valid_anchors, 2);
    assert!(!c.degenerate);
    let expect = oracle::pcl_domain(&rows, &[0, 0, 1], &SimilarityConfig::default()).unwrap();
    assert!((g.scalar_value(c.loss) - expect).abs() < 1e-12);
}

#[test]
fn pcl_total_is_the_equal_weight_mean() {
    let rows = vec![vec![0.7, 0.1, -0.4]; 4];
    let mut g = Graph::new();
    let z = g.constant(&[4, 3], rows.concat()).unwrap();
    let out = losses::pcl_total(&mut g, z, z, &[0, 0, 1, 1], &[0, 0, 0, 0], &SimilarityConfig::default()).unwrap();
    assert!((g.scalar_value(out.loss) - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn two_identical_same_class_vectors_give_zero() {
    let rows = vec![vec![0.2, 0.5]; 2];
    let (l, _) = cci_loss(&rows, &[1, 1], SimilarityConfig::default());
    assert!(l.abs() < 1e-15);
}

#[test]
fn classification_examples() {
    let uniform = vec![vec![0.3; 4]; 3];
    assert!((cls(&uniform, &[0, 1, 3]) - 4f64.ln()).abs() < 1e-12);
    let saturated = vec![vec![30.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 30.0, 0.0]];
    assert!(cls(&saturated, &[0, 2]) < 1e-9);

    let mut g = Graph::new();
    let z = g.constant(&[1, 4], vec![0.0; 4]).unwrap();
    let err = losses::cls_loss(&mut g, z, &[4]).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn shape_and_length_errors() {
    let mut g = Graph::new();
    let z = g.constant(&[4, 2], vec![0.0; 8]).unwrap();
    assert!(losses::pcl_domain(&mut g, z, &[0, 0, 1], &SimilarityConfig::default()).is_err());
    assert!(losses::cci(&mut g, z, &[0; 5], &SimilarityConfig::default()).is_err());
    let one = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    assert!(losses::cci(&mut g, one, &[0], &SimilarityConfig::default()).is_err());
    let bad = SimilarityConfig {
        temperature: 0.0,
        normalize: true,
    };
    assert!(matches!(losses::cci(&mut g, z, &[0; 4], &bad), Err(Error::Config(_))));
}

#[test]
fn total_loss_arithmetic() {
    let mut g = Graph::new();
    let c = g.constant(&[1], vec![1.0]).unwrap();
    let p = g.constant(&[1], vec![2.0]).unwrap();
    let x = g.constant(&[1], vec![3.0]).unwrap();
    let parts = LossParts {
        cls: c,
        pcl: Some(p),
        cci: Some(x),
    };
    let t = losses::total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
    assert!((g.scalar_value(t) - 4.2).abs() < 1e-15);
    let zero = LossWeights {
        lambda_pcl: 0.0,
        lambda_cci: 0.0,
    };
    let t = losses::total_loss(&mut g, &parts, &zero).unwrap();
    assert_eq!(g.scalar_value(t), 1.0);

    let nan = g.constant(&[1], vec![f64::NAN]).unwrap();
    let err = losses::total_loss(
        &mut g,
        &LossParts {
            cls: c,
            pcl: None,
            cci: Some(nan),
        },
        &zero,
    )
    .unwrap_err();
    assert!(err.to_string().contains("cci"), "{err}");
}

#[test]
fn total_gradient_is_the_weighted_sum_of_component_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, d, classes) = (6, 5, 3);
    let data: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..d * classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = [0, 1, 2, 0, 1, 2];
    let domains = [0, 0, 0, 1, 1, 1];
    let weights = LossWeights {
        lambda_pcl: 0.37,
        lambda_cci: 1.9,
    };
    let cfg = SimilarityConfig::default();
    let grad = |which: &str| {
        let mut g = Graph::new();
        let z = g.variable(&[b, d], data.clone()).unwrap();
        let wv = g.variable(&[d, classes], w.clone()).unwrap();
        let logits = g.matmul(z, wv).unwrap();
        let c = losses::cls_loss(&mut g, logits, &labels).unwrap();
        let p = losses::pcl_total(&mut g, z, z, &labels, &domains, &cfg).unwrap().loss;
        let x = losses::cci(&mut g, z, &labels, &cfg).unwrap().loss;
        let out = match which {
            "cls" => c,
            "pcl" => p,
            "cci" => x,
            _ => losses::total_loss(
                &mut g,
                &LossParts {
                    cls: c,
                    pcl: Some(p),
                    cci: Some(x),
                },
                &weights,
            )
            .unwrap(),
        };
        g.backward(out).unwrap();
        let mut v = g.grad(z).unwrap().to_vec();
        v.extend_from_slice(g.grad(wv).map_or(&vec![0.0; d * classes][..], |x| x));
        v
    };
    let (gc, gp, gx, gt) = (grad("cls"), grad("pcl"), grad("cci"), grad("total"));
    for i in 0..gt.len() {
        let expect = gc[i] + weights.lambda_pcl * gp[i] + weights.lambda_cci * gx[i];
        assert!((gt[i] - expect).abs() < 1e-9, "{i}: {} vs {expect}", gt[i]);
    }
}

fn batch_strategy() -> impl Strategy<Value = (usize, usize, u64, f64, bool)> {
    (2usize..=8, 1usize..=6, any::<u64>(), 0.05f64..2.0, any::<bool>())
}

fn random_batch(b: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let labels = (0..b).map(|_| rng.gen_range(0..3)).collect();
    let domains = (0..b).map(|_| rng.gen_range(0..3)).collect();
    (rows, labels, domains)
}

fn close(a: f64, b: Option<f64>, deg: bool, tol: f64) -> bool {
    match b {
        Some(b) => !deg && (a - b).abs() < tol,
        None => deg && a == 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_loss_matches_its_oracle((b, d, seed, tau, normalize) in batch_strategy()) {
        let (rows, labels, domains) = random_batch(b, d, seed);
        let cfg = SimilarityConfig { temperature: tau, normalize };
        let (l, deg) = domain_loss(&rows, &domains, cfg);
        prop_assert!(close(l, oracle::pcl_domain(&rows, &domains, &cfg), deg, 1e-9));
        let (l, deg) = task_loss(&rows, &labels, &domains, cfg);
        prop_assert!(close(l, oracle::pcl_task(&rows, &labels, &domains, &cfg), deg, 1e-9));
        let (l, deg) = cci_loss(&rows, &labels, cfg);
        prop_assert!(close(l, oracle::cci(&rows, &labels, &cfg), deg, 1e-9));
        let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().take(3).copied().chain([0.0; 3]).take(3).collect()).collect();
        prop_assert!((cls(&logits, &labels) - oracle::cls_loss(&logits, &labels)).abs() < 1e-12);
    }

    #[test]
    fn pcl_total_composes_exactly((b, d, seed, tau, normalize) in batch_strategy()) {
        let (rows, labels, domains) = random_batch(b, d, seed);
        let (rows2, _, _) = random_batch(b, d, seed ^ 1);
        let cfg = SimilarityConfig { temperature: tau, normalize };
        let mut g = Graph::new();
        let c = g.constant(&[b, d], rows.concat()).unwrap();
        let p = g.constant(&[b, d], rows2.concat()).unwrap();
        let out = losses::pcl_total(&mut g, c, p, &labels, &domains, &cfg).unwrap();
        let expect = 0.5 * g.scalar_value(out.domain.loss) + 0.5 * g.scalar_value(out.task.loss);
        prop_assert!((g.scalar_value(out.loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_are_permutation_invariant((b, d, seed, tau, normalize) in batch_strategy(), shift in 0usize..8) {
        let (rows, labels, domains) = random_batch(b, d, seed);
        let perm: Vec<usize> = (0..b).map(|i| (i * 5 + shift) % b).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort_unstable(); p.dedup(); p.len() == b });
        let pr: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pd: Vec<usize> = perm.iter().map(|&i| domains[i]).collect();
        let cfg = SimilarityConfig { temperature: tau, normalize };
        prop_assert!((domain_loss(&rows, &domains, cfg).0 - domain_loss(&pr, &pd, cfg).0).abs() < 1e-12);
        prop_assert!((task_loss(&rows, &labels, &domains, cfg).0 - task_loss(&pr, &pl, &pd, cfg).0).abs() < 1e-12);
        prop_assert!((cci_loss(&rows, &labels, cfg).0 - cci_loss(&pr, &pl, cfg).0).abs() < 1e-12);
    }

    #[test]
    fn normalized_losses_are_finite_and_non_negative((b, d, seed, tau, _n) in batch_strategy()) {
        let (rows, labels, domains) = random_batch(b, d, seed);
        let cfg = SimilarityConfig { temperature: tau, normalize: true };
        for (l, _) in [domain_loss(&rows, &domains, cfg), task_loss(&rows, &labels, &domains, cfg), cci_loss(&rows, &labels, cfg)] {
            prop_assert!(l.is_finite() && l >= 0.0);
        }
    }

    #[test]
    fn identical_inputs_are_temperature_free(b in 2usize..=8, tau in 0.01f64..10.0, v in prop::collection::vec(-2.0f64..2.0, 3)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let rows = vec![v; b];
        let cfg = SimilarityConfig { temperature: tau, normalize: true };
        let (l, _) = cci_loss(&rows, &vec![0; b], cfg);
        prop_assert!((l - ((b - 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn predictions_ignore_uniform_logit_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let labels = [0, 1, 2, 3, 0];
        prop_assert!((cls(&rows, &labels) - cls(&shifted, &labels)).abs() < 1e-12);
        let argmax = |r: &Vec<f64>| (0..4).max_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap()).unwrap();
        for (a, b) in rows.iter().zip(&shifted) {
            prop_assert_eq!(argmax(a), argmax(b));
        }
    }
}
