//! Analytic-vs-numeric gradient comparison.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hpgn::FeatureExtractor;
use crate::losses::{self, LossParts, LossWeights, SimilarityConfig};
use crate::model::Model;
use crate::nn::{ParamList, Parameterized};
use crate::tensor::Tensor;
use crate::vit::VitConfig;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many entries per tensor (all when `None`).
    pub max_entries: Option<usize>,
    /// Relative errors are computed against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            max_entries: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    /// Entries whose difference quotient had to be taken with a smaller step
    /// because the first stencil straddled a non-differentiable point.
    pub refined: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries_checked).sum()
    }

    pub fn refined(&self) -> usize {
        self.params.iter().map(|p| p.refined).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }

    pub fn merge(&mut self, prefix: &str, other: GradcheckReport) {
        for mut p in other.params {
            p.name = format!("{prefix}/{}", p.name);
            self.params.push(p);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Smallest step tried when refining around a kink.
const MIN_STEP: f64 = 1e-9;

/// Compares gradients of the scalar built by `loss` against central finite
/// differences for every trainable tensor of `state`.
///
/// When some ReLU input changes sign between the two ends of the stencil
/// (see [`Graph::kink_signature`]) the quotient would measure a
/// non-differentiable point, so the step is halved until both ends lie on
/// the same smooth piece. Tensors with `requires_grad == false` are skipped.
pub fn gradcheck<S, F>(state: &mut S, loss: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    S: Parameterized,
    F: Fn(&S, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(state, &mut g)?;
    g.backward(out)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    state.visit("", &mut |name, t| {
        if t.requires_grad() {
            let grad = g.grad_of(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            analytic.push((name.to_string(), grad));
        }
    });
    drop(g);

    let eval = |state: &S| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let out = loss(state, &mut g)?;
        Ok((g.scalar_value(out), g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut refined = 0;
        for &j in &entries {
            let original = nth_trainable_value(state, pi, j);
            let mut h = opts.step;
            let numeric = loop {
                set_nth_trainable(state, pi, j, original + h);
                let (plus, sp) = eval(state)?;
                set_nth_trainable(state, pi, j, original - h);
                let (minus, sm) = eval(state)?;
                set_nth_trainable(state, pi, j, original);
                if sp == sm || h / 2.0 < MIN_STEP {
                    break (plus - minus) / (2.0 * h);
                }
                if h == opts.step {
                    refined += 1;
                }
                h /= 2.0;
            };
            worst = worst.max(relative_error(grad[j], numeric, opts.floor));
        }
        report.params.push(ParamCheck {
            name: name.clone(),
            entries_checked: entries.len(),
            max_rel_error: worst,
            max_abs_analytic: grad.iter().fold(0.0, |m, v| m.max(v.abs())),
            refined,
        });
    }
    Ok(report)
}

fn nth_trainable_value<S: Parameterized>(state: &S, index: usize, entry: usize) -> f64 {
    let mut k = 0;
    let mut value = f64::NAN;
    state.visit("", &mut |_, t| {
        if t.requires_grad() {
            if k == index {
                value = t.data()[entry];
            }
            k += 1;
        }
    });
    value
}

fn set_nth_trainable<S: Parameterized>(state: &mut S, index: usize, entry: usize, value: f64) {
    let mut k = 0;
    state.visit_mut("", &mut |_, t| {
        if t.requires_grad() {
            if k == index {
                t.data_mut()[entry] = value;
            }
            k += 1;
        }
    });
}

/// Reduces any node to a scalar through a fixed random projection so every
/// output entry carries a distinct weight.
pub fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(&shape, w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type CaseFn = Box<dyn Fn(&ParamList, &mut Graph) -> Result<Var> + Send + Sync>;

/// One primitive under test: named random inputs and the op applied to them.
pub struct PrimitiveCase {
    pub name: String,
    pub inputs: Vec<(&'static str, Vec<usize>)>,
    pub seed: u64,
    pub build: CaseFn,
}

impl PrimitiveCase {
    fn new(
        name: &str,
        seed: u64,
        inputs: &[(&'static str, &[usize])],
        build: impl Fn(&ParamList, &mut Graph) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        PrimitiveCase {
            name: name.to_string(),
            inputs: inputs.iter().map(|(n, s)| (*n, s.to_vec())).collect(),
            seed,
            build: Box::new(build),
        }
    }

    pub fn params(&self) -> ParamList {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        ParamList(
            self.inputs
                .iter()
                .map(|(n, s)| (n.to_string(), Tensor::randn(s, 1.0, &mut rng).into_param()))
                .collect(),
        )
    }

    pub fn check(&self, opts: GradcheckOptions) -> Result<GradcheckReport> {
        let mut state = self.params();
        gradcheck(
            &mut state,
            |s, g| {
                let y = (self.build)(s, g)?;
                project(g, y)
            },
            opts,
        )
    }
}

fn unary(name: &str, seed: u64, shape: &[usize], f: fn(&mut Graph, Var) -> Result<Var>) -> PrimitiveCase {
    PrimitiveCase::new(name, seed, &[("a", shape)], move |s, g| {
        let a = g.param(s.get("a"));
        f(g, a)
    })
}

fn binary(name: &str, seed: u64, sa: &[usize], sb: &[usize], f: fn(&mut Graph, Var, Var) -> Result<Var>) -> PrimitiveCase {
    PrimitiveCase::new(name, seed, &[("a", sa), ("b", sb)], move |s, g| {
        let (a, b) = (g.param(s.get("a")), g.param(s.get("b")));
        f(g, a, b)
    })
}

/// Every differentiable primitive of [`Graph`], on small random inputs.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let sh: &[usize] = &[2, 3, 4];
    let mut cases = vec![
        binary("add", 1, sh, sh, |g, a, b| g.add(a, b)),
        binary("sub", 2, sh, sh, |g, a, b| g.sub(a, b)),
        binary("mul", 3, sh, sh, |g, a, b| g.mul(a, b)),
        binary("div", 4, sh, sh, |g, a, b| {
            let b = g.exp(b);
            g.div(a, b)
        }),
        unary("scale/add_scalar/neg", 5, sh, |g, a| {
            let a = g.scale(a, -1.7);
            let a = g.add_scalar(a, 0.3);
            Ok(g.neg(a))
        }),
        unary("relu", 6, sh, |g, a| Ok(g.relu(a))),
        unary("gelu", 7, sh, |g, a| Ok(g.gelu(a))),
        unary("exp", 8, sh, |g, a| Ok(g.exp(a))),
        unary("log/sqrt", 9, sh, |g, a| {
            let a = g.exp(a);
            let l = g.log(a);
            let r = g.sqrt(a);
            g.add(l, r)
        }),
        binary("add_broadcast", 10, sh, &[3, 4], |g, a, b| g.add_broadcast(a, b)),
        binary("mul_broadcast", 11, sh, &[4], |g, a, b| g.mul_broadcast(a, b)),
        binary("matmul", 12, &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
        binary("matmul_t", 13, &[4, 3], &[2, 4], |g, a, b| g.matmul_t(a, b, true, true)),
        unary("gram", 14, &[5, 3], |g, a| g.matmul_t(a, a, false, true)),
        unary("softmax", 19, &[3, 5], |g, a| Ok(g.softmax(a))),
        unary("log_softmax", 20, &[3, 5], |g, a| Ok(g.log_softmax(a))),
        unary("masked_log_softmax", 21, &[4, 4], |g, a| {
            g.masked_log_softmax(a, (0..16).map(|i| i / 4 != i % 4).collect())
        }),
        PrimitiveCase::new("layer_norm", 22, &[("a", &[2, 3, 6]), ("s", &[6]), ("b", &[6])], |s, g| {
            let (a, sc, b) = (g.param(s.get("a")), g.param(s.get("s")), g.param(s.get("b")));
            g.layer_norm(a, sc, b, 1e-5)
        }),
        PrimitiveCase::new("linear", 23, &[("x", &[2, 3, 5]), ("w", &[5, 4]), ("b", &[4])], |s, g| {
            let (x, w, b) = (g.param(s.get("x")), g.param(s.get("w")), g.param(s.get("b")));
            g.linear(x, w, Some(b))
        }),
        unary("attention", 24, &[2, 5, 12], |g, a| g.attention(a, 2)),
        unary("gap", 25, &[2, 3, 4, 5], |g, a| g.gap(a)),
        binary("concat", 26, &[2, 3, 4], &[2, 1, 4], |g, a, b| g.concat(&[a, b, a], 1)),
        unary("reshape/permute", 27, sh, |g, a| {
            let p = g.permute(a, &[2, 0, 1])?;
            g.reshape(p, &[8, 3])
        }),
        unary("transpose", 28, &[3, 5], |g, a| g.transpose(a)),
        unary("narrow", 29, &[2, 5, 3], |g, a| g.narrow(a, 1, 1, 3)),
        binary("expand_leading/tile_spatial", 30, &[3], &[2, 3], |g, a, b| {
            let e = g.expand_leading(a, 2)?;
            let y = g.add(e, b)?;
            g.tile_spatial(y, 2, 3)
        }),
        binary("row_dot", 31, &[4, 3], &[4, 3], |g, a, b| g.row_dot(a, b)),
        unary("normalize_rows", 32, &[4, 3], |g, a| g.normalize_rows(a, 1e-12)),
        unary("sum/mean", 33, &[4, 3], |g, a| {
            let s = g.sum(a);
            let m = g.mean(a);
            g.mul(s, m)
        }),
    ];
    for (i, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)].into_iter().enumerate() {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        cases.push(PrimitiveCase::new(&format!("bmm[{ta},{tb}]"), 15 + i as u64, &[("a", sa), ("b", sb)], move |s, g| {
            let (a, b) = (g.param(s.get("a")), g.param(s.get("b")));
            g.bmm(a, b, ta, tb)
        }));
    }
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        cases.push(PrimitiveCase::new(
            &format!("conv2d[s{stride},p{pad}]"),
            34,
            &[("x", &[2, 3, 5, 6]), ("k", &[4, 3, 3, 3]), ("b", &[4])],
            move |s, g| {
                let (x, k, b) = (g.param(s.get("x")), g.param(s.get("k")), g.param(s.get("b")));
                g.conv2d(x, k, Some(b), stride, pad)
            },
        ));
    }
    cases
}

/// Entries sampled per tensor in [`full_loss_check`].
pub const FULL_LOSS_ENTRIES: usize = 6;
/// Relative-error floor for the full model. The loss is O(1) and central
/// differences at step 1e-5 carry about 1e-10 of rounding noise, so entries
/// whose true gradient is zero (key biases under softmax shift invariance)
/// would otherwise score noise / 1e-6.
pub const FULL_LOSS_FLOOR: f64 = 1e-5;

/// Gradcheck of `L_cls + λ_PCL·L_PCL + λ_CCI·L_CCI` through the complete
/// prompted model on a 4-sample batch. The extractor stays frozen, as in
/// training; every other tensor is checked on a random subset of entries.
pub fn full_loss_check(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VitConfig::default();
    let mut extractor = FeatureExtractor::new(&mut rng);
    extractor.freeze();
    let mut model = Model::hcvp(extractor, cfg, &mut rng)?;
    let n = 3 * cfg.image_size * cfg.image_size;
    let images: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels = [0, 0, 1, 1];
    let domains = [0, 0, 0, 1];
    let sim = SimilarityConfig::default();
    let weights = LossWeights::default();
    gradcheck(
        &mut model,
        |m, g| {
            let x = g.constant(&[4, 3, cfg.image_size, cfg.image_size], images.clone())?;
            let f = m.forward(g, x)?;
            let prompts = f.prompts.ok_or_else(|| Error::Contract("model has no prompts".into()))?;
            let cls = losses::cls_loss(g, f.logits, &labels)?;
            let pcl = losses::pcl_total(g, prompts.domain, prompts.task, &labels, &domains, &sim)?;
            let cci = losses::cci(g, f.x_n, &labels, &sim)?;
            losses::total_loss(
                g,
                &LossParts {
                    cls,
                    pcl: Some(pcl.loss),
                    cci: Some(cci.loss),
                },
                &weights,
            )
        },
        GradcheckOptions {
            max_entries: Some(opts.max_entries.unwrap_or(FULL_LOSS_ENTRIES)),
            floor: opts.floor.max(FULL_LOSS_FLOOR),
            ..opts
        },
    )
}
