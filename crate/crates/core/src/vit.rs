//! A small pre-norm Vision Transformer whose sequence carries two prompt
//! slots between the class token and the patch tokens: `[x, C, P, E…]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{join, LayerNorm, Linear, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.num_classes < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, mlp ratio must be ≥ 1 and classes ≥ 2".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
}

/// Output of one transformer layer over the full sequence.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    /// `[b, T, d]`
    pub tokens: Var,
    /// Merged-head attention output `[b, T, d]`; its weights are available
    /// through [`Graph::attention_weights`].
    pub context: Var,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Block {
            norm1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::new(d, d, rng),
            norm2: LayerNorm::new(d),
            fc1: Linear::new(d, d * cfg.mlp_ratio, rng),
            fc2: Linear::new(d * cfg.mlp_ratio, d, rng),
            heads: cfg.heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<BlockOutput> {
        let [_, _, _] = *g.shape(seq) else {
            return Err(Error::Shape(format!("block input {:?} is not [b, T, d]", g.shape(seq))));
        };

        let x = self.norm1.forward(g, seq)?;
        let qkv = self.qkv.forward(g, x)?;
        let ctx = g.attention(qkv, self.heads)?;
        let out = self.proj.forward(g, ctx)?;
        let seq = g.add(seq, out)?;

        let x = self.norm2.forward(g, seq)?;
        let x = self.fc1.forward(g, x)?;
        let x = g.gelu(x);
        let x = self.fc2.forward(g, x)?;
        let tokens = g.add(seq, x)?;
        Ok(BlockOutput { tokens, context: ctx })
    }
}

impl Parameterized for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Vit {
    pub config: VitConfig,
    pub patch_embed: Linear,
    /// `[num_patches, d]`; prompt slots get none.
    pub pos_embed: Tensor,
    /// `[1, d]`
    pub cls_token: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// Everything a forward pass exposes beyond `x_N`.
#[derive(Debug, Clone)]
pub struct VitTrace {
    pub x_n: Var,
    pub layers: Vec<BlockOutput>,
}

impl Vit {
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Vit {
            patch_embed: Linear::new(config.patch_dim(), d, rng),
            pos_embed: Tensor::randn(&[config.num_patches(), d], 0.02, rng).into_param(),
            cls_token: Tensor::randn(&[1, d], 0.02, rng).into_param(),
            blocks: (0..config.depth).map(|_| Block::new(&config, rng)).collect(),
            norm: LayerNorm::new(d),
            head: Linear::new(d, config.num_classes, rng),
            config,
        })
    }

    /// Non-overlapping patches, linearly projected, plus positional embeddings.
    pub fn patchify(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let c = &self.config;
        let (s, p, n) = (c.image_size, c.patch_size, c.grid());
        let b = match *g.shape(images) {
            [b, 3, h, w] if h == s && w == s => b,
            ref other => {
                return Err(Error::Shape(format!("expected images [b, 3, {s}, {s}], got {other:?}")))
            }
        };
        let x = g.reshape(images, &[b, 3, n, p, n, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[b, n * n, c.patch_dim()])?;
        let e = self.patch_embed.forward(g, x)?;
        let pos = g.param(&self.pos_embed);
        g.add_broadcast(e, pos)
    }

    /// One transformer layer over `[x, C, P, E]` (or `[x, E]` without
    /// prompts). Returns the new class token `[b, d]`, the new patch tokens,
    /// and the raw block output; the prompt outputs are dropped.
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        i: usize,
        x: Var,
        prompts: Option<(Var, Var)>,
        patches: Var,
    ) -> Result<(Var, Var, BlockOutput)> {
        let block = self.blocks.get(i).ok_or_else(|| {
            Error::Shape(format!("layer index {i} out of range for depth {}", self.blocks.len()))
        })?;
        let [b, np, d] = *g.shape(patches) else {
            return Err(Error::Shape(format!("patch tokens {:?} are not [b, n, d]", g.shape(patches))));
        };
        let x3 = g.reshape(x, &[b, 1, d])?;
        let mut parts = vec![x3];
        if let Some((c, p)) = prompts {
            parts.push(g.reshape(c, &[b, 1, d])?);
            parts.push(g.reshape(p, &[b, 1, d])?);
        }
        let skip = parts.len();
        parts.push(patches);
        let seq = g.concat(&parts, 1)?;
        let out = block.forward(g, seq)?;
        let x_next = g.narrow(out.tokens, 1, 0, 1)?;
        let x_next = g.reshape(x_next, &[b, d])?;
        let e_next = g.narrow(out.tokens, 1, skip, np)?;
        Ok((x_next, e_next, out))
    }

    /// Full forward pass. `prompts` must hold one `(C_i, P_i)` per layer, or
    /// be `None` for the prompt-free sequence.
    pub fn forward_traced(&self, g: &mut Graph, images: Var, prompts: Option<&[(Var, Var)]>) -> Result<VitTrace> {
        if let Some(p) = prompts {
            if p.len() != self.blocks.len() {
                return Err(Error::Contract(format!(
                    "{} prompt pairs supplied for {} layers",
                    p.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut e = self.patchify(g, images)?;
        let b = g.shape(e)[0];
        let cls = g.param(&self.cls_token);
        let cls = g.expand_leading(cls, b)?;
        let mut x = g.reshape(cls, &[b, self.config.embed_dim])?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let (xn, en, out) = self.layer_forward(g, i, x, prompts.map(|p| p[i]), e)?;
            x = xn;
            e = en;
            layers.push(out);
        }
        let x_n = self.norm.forward(g, x)?;
        Ok(VitTrace { x_n, layers })
    }

    pub fn forward(&self, g: &mut Graph, images: Var, prompts: Option<&[(Var, Var)]>) -> Result<Var> {
        Ok(self.forward_traced(g, images, prompts)?.x_n)
    }

    pub fn classify(&self, g: &mut Graph, x_n: Var) -> Result<Var> {
        self.head.forward(g, x_n)
    }
}

impl Parameterized for Vit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        f(&join(prefix, "cls_token"), &self.cls_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
