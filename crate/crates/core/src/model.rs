//! The full prompt-conditioned classifier and its prompt-free baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hpgn::{FeatureExtractor, Hpgn, PromptPair};
use crate::nn::{join, Parameterized};
use crate::pmn::Pmn;
use crate::tensor::Tensor;
use crate::vit::{Vit, VitConfig, VitTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Generated prompts injected at every layer.
    Hcvp,
    /// Plain transformer, no prompt slots.
    Erm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Hcvp => "hcvp",
            Method::Erm => "erm",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcvp" => Ok(Method::Hcvp),
            "erm" => Ok(Method::Erm),
            other => Err(Error::Config(format!("unknown method `{other}` (expected hcvp or erm)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub method: Method,
    pub hpgn: Option<Hpgn>,
    pub pmn: Option<Pmn>,
    pub vit: Vit,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub prompts: Option<PromptPair>,
    pub layer_prompts: Vec<(Var, Var)>,
    pub trace: VitTrace,
    pub x_n: Var,
    pub logits: Var,
}

impl Model {
    pub fn hcvp<R: Rng + ?Sized>(extractor: FeatureExtractor, vit: VitConfig, rng: &mut R) -> Result<Self> {
        if !extractor.is_frozen() {
            return Err(Error::Contract("prompt generator needs a frozen extractor".into()));
        }
        let vit = Vit::new(vit, rng)?;
        let d = vit.config.embed_dim;
        let hpgn = Hpgn::new(extractor, d, rng);
        let pmn = Pmn::new(vit.config.depth, vit.config.depth, d, rng)?;
        Ok(Model {
            method: Method::Hcvp,
            hpgn: Some(hpgn),
            pmn: Some(pmn),
            vit,
        })
    }

    pub fn erm<R: Rng + ?Sized>(vit: VitConfig, rng: &mut R) -> Result<Self> {
        Ok(Model {
            method: Method::Erm,
            hpgn: None,
            pmn: None,
            vit: Vit::new(vit, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Forward> {
        let (prompts, layer_prompts) = match (&self.hpgn, &self.pmn) {
            (Some(hpgn), Some(pmn)) => {
                let pair = hpgn.generate(g, images)?;
                let layers = pmn.roll_forward(g, pair.domain, pair.task)?;
                (Some(pair), layers)
            }
            (None, None) => (None, Vec::new()),
            _ => return Err(Error::Contract("prompt generator and modulator must come together".into())),
        };
        let trace = self.vit.forward_traced(
            g,
            images,
            if prompts.is_some() { Some(&layer_prompts) } else { None },
        )?;
        let logits = self.vit.classify(g, trace.x_n)?;
        Ok(Forward {
            prompts,
            layer_prompts,
            x_n: trace.x_n,
            trace,
            logits,
        })
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor> {
        self.hpgn.as_ref().map(|h| &h.extractor)
    }
}

impl Parameterized for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(h) = &self.hpgn {
            h.visit(&join(prefix, "hpgn"), f);
        }
        if let Some(p) = &self.pmn {
            p.visit(&join(prefix, "pmn"), f);
        }
        self.vit.visit(&join(prefix, "vit"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(h) = &mut self.hpgn {
            h.visit_mut(&join(prefix, "hpgn"), f);
        }
        if let Some(p) = &mut self.pmn {
            p.visit_mut(&join(prefix, "pmn"), f);
        }
        self.vit.visit_mut(&join(prefix, "vit"), f);
    }
}
