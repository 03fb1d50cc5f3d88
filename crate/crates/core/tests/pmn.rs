use hcvp::gradcheck::{gradcheck, project, GradcheckOptions};
use hcvp::hpgn::FeatureExtractor;
use hcvp::model::Model;
use hcvp::nn::Parameterized;
use hcvp::pmn::{Pmn, PmnBlock};
use hcvp::vit::VitConfig;
use hcvp::{Error, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 16;

fn inputs(g: &mut Graph, seed: u64, b: usize, lo: f64) -> (Var, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = || {
        let v: Vec<f64> = (0..b * D).map(|_| rng.gen_range(lo..1.0)).collect();
        g.constant(&[b, D], v).unwrap()
    };
    (mk(), mk())
}

#[test]
fn block_count_must_match_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(Pmn::new(3, 4, D, &mut rng), Err(Error::Contract(_))));
    assert!(matches!(Pmn::new(5, 4, D, &mut rng), Err(Error::Contract(_))));
    assert_eq!(Pmn::new(4, 4, D, &mut rng).unwrap().depth(), 4);
    let shallow = VitConfig {
        depth: 2,
        ..Default::default()
    };
    assert!(Model::erm(shallow, &mut rng).is_ok());
    let mut ex = FeatureExtractor::new(&mut rng);
    ex.freeze();
    let m = Model::hcvp(ex, shallow, &mut rng).unwrap();
    assert_eq!(m.pmn.unwrap().depth(), 2);
}

#[test]
fn zero_weights_give_zero_prompts() {
    let mut pmn = Pmn::new(4, 4, D, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    pmn.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    let mut g = Graph::new();
    let (c, p) = inputs(&mut g, 2, 3, -1.0);
    for (ci, pi) in pmn.roll_forward(&mut g, c, p).unwrap() {
        assert!(g.value(ci).iter().chain(g.value(pi)).all(|&v| v == 0.0));
    }
}

#[test]
fn identity_blocks_pass_non_negative_prompts_through() {
    let pmn = Pmn::from_blocks((0..4).map(|_| PmnBlock::identity(D)).collect(), 4).unwrap();
    let mut g = Graph::new();
    let (c, p) = inputs(&mut g, 3, 3, 0.0);
    let out = pmn.roll_forward(&mut g, c, p).unwrap();
    assert_eq!(out.len(), 4);
    for (ci, pi) in out {
        assert_eq!(g.value(ci), g.value(c));
        assert_eq!(g.value(pi), g.value(p));
    }
}

#[test]
fn roll_forward_is_the_modulate_chain() {
    let pmn = Pmn::new(4, 4, D, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut g = Graph::new();
    let (c0, p0) = inputs(&mut g, 5, 2, -1.0);
    let rolled = pmn.roll_forward(&mut g, c0, p0).unwrap();
    let (mut c, mut p) = (c0, p0);
    for (i, &(rc, rp)) in rolled.iter().enumerate() {
        (c, p) = pmn.modulate(&mut g, i, c, p).unwrap();
        assert_eq!(g.value(rc), g.value(c));
        assert_eq!(g.value(rp), g.value(p));
    }
    assert!(matches!(pmn.modulate(&mut g, 4, c, p), Err(Error::Shape(_))));

    // the two paths do not share weights
    let (dc, dp) = pmn.modulate(&mut g, 0, c0, c0).unwrap();
    assert_ne!(g.value(dc), g.value(dp));
}

#[test]
fn distinct_inputs_give_distinct_prompt_lists() {
    let pmn = Pmn::new(4, 4, D, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut g = Graph::new();
    let (a_c, a_p) = inputs(&mut g, 7, 1, -1.0);
    let (b_c, b_p) = inputs(&mut g, 8, 1, -1.0);
    let a = pmn.roll_forward(&mut g, a_c, a_p).unwrap();
    let b = pmn.roll_forward(&mut g, b_c, b_p).unwrap();
    for (&(ac, ap), &(bc, bp)) in a.iter().zip(&b) {
        for (x, y) in [(ac, bc), (ap, bp)] {
            let d: f64 = g.value(x).iter().zip(g.value(y)).map(|(u, v)| (u - v).abs()).sum();
            assert!(d > 1e-9);
        }
    }
}

fn small_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = FeatureExtractor::new(&mut rng);
    ex.freeze();
    let cfg = VitConfig {
        patch_size: 8,
        embed_dim: D,
        depth: 2,
        heads: 2,
        num_classes: 3,
        ..Default::default()
    };
    Model::hcvp(ex, cfg, &mut rng).unwrap()
}

fn images(seed: u64, b: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b * 3072).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn class_token_loss_reaches_the_first_block_and_the_generator() {
    let mut model = small_model(9);
    let data = images(10, 2);
    let report = gradcheck(
        &mut model,
        |m, g| {
            let x = g.constant(&[2, 3, 32, 32], data.clone())?;
            let f = m.forward(g, x)?;
            project(g, f.x_n)
        },
        GradcheckOptions {
            max_entries: Some(6),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:#?}");
    for prefix in ["pmn.block0.domain", "pmn.block0.task", "hpgn.domain_mlp", "hpgn.phi"] {
        let nonzero = report
            .params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .any(|p| p.max_abs_analytic > 1e-10);
        assert!(nonzero, "no gradient reached {prefix}");
    }
}

#[test]
fn generator_gradients_are_nonzero_across_random_inputs() {
    let model = small_model(11);
    for seed in 0..5 {
        let mut g = Graph::new();
        let x = g.constant(&[3, 3, 32, 32], images(100 + seed, 3)).unwrap();
        let f = model.forward(&mut g, x).unwrap();
        let loss = project(&mut g, f.x_n).unwrap();
        g.backward(loss).unwrap();
        let hpgn = model.hpgn.as_ref().unwrap();
        let mut total = 0.0;
        hpgn.visit("", &mut |name, t| {
            if !name.starts_with("extractor") {
                total += g.grad_of(t).map_or(0.0, |gr| gr.iter().map(|v| v.abs()).sum());
            }
        });
        assert!(total > 1e-8, "seed {seed}: {total}");
    }
}
