//! Prompt modulation: one two-layer MLP per transformer layer and per prompt
//! path, chained so layer `i` sees the prompts transformed `i + 1` times.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{join, Linear, Mlp, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PmnBlock {
    pub domain_path: Mlp,
    pub task_path: Mlp,
}

impl PmnBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        PmnBlock {
            domain_path: Mlp::new(dim, dim, dim, rng),
            task_path: Mlp::new(dim, dim, dim, rng),
        }
    }

    /// Identity weights, zero biases on both paths.
    pub fn identity(dim: usize) -> Self {
        let mlp = || Mlp {
            fc1: Linear::identity(dim),
            fc2: Linear::identity(dim),
        };
        PmnBlock {
            domain_path: mlp(),
            task_path: mlp(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pmn {
    pub blocks: Vec<PmnBlock>,
}

impl Pmn {
    /// Fails unless `blocks` equals the transformer depth.
    pub fn new<R: Rng + ?Sized>(blocks: usize, vit_depth: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Pmn::from_blocks((0..blocks).map(|_| PmnBlock::new(dim, rng)).collect(), vit_depth)
    }

    pub fn from_blocks(blocks: Vec<PmnBlock>, vit_depth: usize) -> Result<Self> {
        if blocks.len() != vit_depth {
            return Err(Error::Contract(format!(
                "prompt modulation needs exactly one block per transformer layer: {} blocks for depth {vit_depth}",
                blocks.len()
            )));
        }
        Ok(Pmn { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn modulate(&self, g: &mut Graph, i: usize, c_prev: Var, p_prev: Var) -> Result<(Var, Var)> {
        let block = self.blocks.get(i).ok_or_else(|| {
            Error::Shape(format!("modulation index {i} out of range for depth {}", self.depth()))
        })?;
        let c = block.domain_path.forward(g, c_prev)?;
        let p = block.task_path.forward(g, p_prev)?;
        Ok((c, p))
    }

    /// Prompts for every layer, starting from the generator output.
    pub fn roll_forward(&self, g: &mut Graph, domain: Var, task: Var) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(self.depth());
        let (mut c, mut p) = (domain, task);
        for i in 0..self.depth() {
            (c, p) = self.modulate(g, i, c, p)?;
            out.push((c, p));
        }
        Ok(out)
    }
}

impl Parameterized for Pmn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.domain_path.visit(&join(prefix, &format!("block{i}.domain")), f);
            b.task_path.visit(&join(prefix, &format!("block{i}.task")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.domain_path.visit_mut(&join(prefix, &format!("block{i}.domain")), f);
            b.task_path.visit_mut(&join(prefix, &format!("block{i}.task")), f);
        }
    }
}
