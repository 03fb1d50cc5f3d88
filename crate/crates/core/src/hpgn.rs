//! Hierarchical prompt generation: a frozen convolutional extractor, a
//! domain-level prompt from pooled features, and a task-level prompt from
//! the feature map conditioned on the domain prompt.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{join, Conv2d, Linear, Mlp, Parameterized};
use crate::tensor::Tensor;

pub const EXTRACTOR_CHANNELS: [usize; 4] = [3, 16, 32, 32];

/// Three stride-2 3×3 conv layers with ReLU: `[b,3,32,32] → [b,32,4,4]`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub convs: Vec<Conv2d>,
    frozen: bool,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let convs = EXTRACTOR_CHANNELS
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, 1, rng))
            .collect();
        FeatureExtractor { convs, frozen: false }
    }

    pub fn out_channels(&self) -> usize {
        EXTRACTOR_CHANNELS[EXTRACTOR_CHANNELS.len() - 1]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops gradient tracking for every extractor tensor.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.visit_mut("", &mut |_, t| t.set_requires_grad(false));
    }

    /// Raw forward pass, usable while the extractor is still being trained.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

impl Parameterized for FeatureExtractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// Domain-level and task-specific prompts of one batch, as graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptPair {
    /// `[b, d_p]`
    pub domain: Var,
    /// `[b, d_p]`
    pub task: Var,
}

#[derive(Debug, Clone)]
pub struct Hpgn {
    pub extractor: FeatureExtractor,
    /// GAP features → domain prompt.
    pub domain_mlp: Mlp,
    /// Conv stack over `[F ; tile(C)]`.
    pub phi_conv1: Conv2d,
    pub phi_conv2: Conv2d,
    pub phi_out: Linear,
}

impl Hpgn {
    pub fn new<R: Rng + ?Sized>(extractor: FeatureExtractor, prompt_dim: usize, rng: &mut R) -> Self {
        let fc = extractor.out_channels();
        Hpgn {
            domain_mlp: Mlp::new(fc, prompt_dim, prompt_dim, rng),
            phi_conv1: Conv2d::new(fc + prompt_dim, fc, 3, 1, 1, rng),
            phi_conv2: Conv2d::new(fc, fc, 3, 1, 1, rng),
            phi_out: Linear::new(fc, prompt_dim, rng),
            extractor,
        }
    }

    pub fn prompt_dim(&self) -> usize {
        self.phi_out.out_dim()
    }

    /// Feature maps `F = R(x)` from the frozen extractor.
    pub fn extract(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.extractor.is_frozen() {
            return Err(Error::Contract(
                "feature extractor must be frozen before prompt generation".into(),
            ));
        }
        self.extractor.forward(g, x)
    }

    /// `C = MLP(GAP(F))`.
    pub fn domain_prompt(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let pooled = g.gap(f)?;
        self.domain_mlp.forward(g, pooled)
    }

    /// `P = Linear(GAP(conv(relu(conv([F ; tile(C)])))))`.
    pub fn task_prompt(&self, g: &mut Graph, f: Var, c: Var) -> Result<Var> {
        let (fb, h, w) = match *g.shape(f) {
            [b, _, h, w] => (b, h, w),
            ref s => return Err(Error::Shape(format!("task_prompt: feature map {s:?} is not 4-d"))),
        };
        if g.shape(c).first() != Some(&fb) {
            return Err(Error::Shape(format!(
                "task_prompt: {fb} feature maps but domain prompts {:?}",
                g.shape(c)
            )));
        }
        let tiled = g.tile_spatial(c, h, w)?;
        let joint = g.concat(&[f, tiled], 1)?;
        let z = self.phi_conv1.forward(g, joint)?;
        let z = g.relu(z);
        let z = self.phi_conv2.forward(g, z)?;
        let z = g.relu(z);
        let pooled = g.gap(z)?;
        self.phi_out.forward(g, pooled)
    }

    pub fn generate(&self, g: &mut Graph, x: Var) -> Result<PromptPair> {
        let f = self.extract(g, x)?;
        let domain = self.domain_prompt(g, f)?;
        let task = self.task_prompt(g, f, domain)?;
        Ok(PromptPair { domain, task })
    }
}

impl Parameterized for Hpgn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.domain_mlp.visit(&join(prefix, "domain_mlp"), f);
        self.phi_conv1.visit(&join(prefix, "phi.conv1"), f);
        self.phi_conv2.visit(&join(prefix, "phi.conv2"), f);
        self.phi_out.visit(&join(prefix, "phi.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.domain_mlp.visit_mut(&join(prefix, "domain_mlp"), f);
        self.phi_conv1.visit_mut(&join(prefix, "phi.conv1"), f);
        self.phi_conv2.visit_mut(&join(prefix, "phi.conv2"), f);
        self.phi_out.visit_mut(&join(prefix, "phi.out"), f);
    }
}
