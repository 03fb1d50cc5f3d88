//! Contrastive and classification objectives.
//!
//! The three contrastive losses share one multi-positive InfoNCE kernel: for
//! every anchor `i` with a non-empty positive set `P(i)`,
//!
//! ```text
//! l_i = −(1/|P(i)|) Σ_{j∈P(i)} log( exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ) )
//! ```
//!
//! and the batch loss is the mean of `l_i` over anchors that have positives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub temperature: f64,
    /// Cosine similarity when true, raw dot product otherwise.
    pub normalize: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            temperature: 0.1,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pcl: f64,
    pub lambda_cci: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pcl: 0.1,
            lambda_cci: 1.0,
        }
    }
}

/// A contrastive loss node plus bookkeeping about its positive sets.
#[derive(Debug, Clone, Copy)]
pub struct Contrastive {
    pub loss: Var,
    pub valid_anchors: usize,
    /// No anchor had a positive; `loss` is a constant zero.
    pub degenerate: bool,
}

const NORM_EPS: f64 = 1e-12;

/// Multi-positive InfoNCE over the rows of `z: [b, d]`.
pub fn info_nce(
    g: &mut Graph,
    z: Var,
    positive: impl Fn(usize, usize) -> bool,
    cfg: &SimilarityConfig,
) -> Result<Contrastive> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let b = match *g.shape(z) {
        [b, _] => b,
        ref s => return Err(Error::Shape(format!("contrastive input {s:?} is not [b, d]"))),
    };
    if b < 2 {
        return Err(Error::Shape(format!("contrastive loss needs b ≥ 2, got {b}")));
    }

    let mut weights = vec![0.0; b * b];
    let mut valid = 0;
    let mut counts = vec![0usize; b];
    for (i, count) in counts.iter_mut().enumerate() {
        *count = (0..b).filter(|&j| j != i && positive(i, j)).count();
        if *count > 0 {
            valid += 1;
        }
    }
    if valid == 0 {
        let loss = g.constant(&[1], vec![0.0])?;
        return Ok(Contrastive {
            loss,
            valid_anchors: 0,
            degenerate: true,
        });
    }
    for i in 0..b {
        for j in 0..b {
            if j != i && positive(i, j) {
                weights[i * b + j] = -1.0 / (counts[i] as f64 * valid as f64);
            }
        }
    }

    let zn = if cfg.normalize { g.normalize_rows(z, NORM_EPS)? } else { z };
    let sim = g.matmul_t(zn, zn, false, true)?;
    let logits = g.scale(sim, 1.0 / cfg.temperature);
    let mask = (0..b * b).map(|k| k / b != k % b).collect();
    let log_prob = g.masked_log_softmax(logits, mask)?;
    let w = g.constant(&[b, b], weights)?;
    let weighted = g.mul(log_prob, w)?;
    let loss = g.sum(weighted);
    Ok(Contrastive {
        loss,
        valid_anchors: valid,
        degenerate: false,
    })
}

fn check_len(what: &str, b: usize, n: usize) -> Result<()> {
    if b != n {
        return Err(Error::Shape(format!("{what}: {n} entries for a batch of {b}")));
    }
    Ok(())
}

/// Positives share the anchor's domain.
pub fn pcl_domain(g: &mut Graph, c: Var, domains: &[usize], cfg: &SimilarityConfig) -> Result<Contrastive> {
    check_len("pcl_domain domains", g.shape(c)[0], domains.len())?;
    info_nce(g, c, |i, j| domains[i] == domains[j], cfg)
}

/// Positives share both class and domain with the anchor.
pub fn pcl_task(
    g: &mut Graph,
    p: Var,
    labels: &[usize],
    domains: &[usize],
    cfg: &SimilarityConfig,
) -> Result<Contrastive> {
    check_len("pcl_task labels", g.shape(p)[0], labels.len())?;
    check_len("pcl_task domains", g.shape(p)[0], domains.len())?;
    info_nce(g, p, |i, j| labels[i] == labels[j] && domains[i] == domains[j], cfg)
}

#[derive(Debug, Clone, Copy)]
pub struct PclOutput {
    pub loss: Var,
    pub domain: Contrastive,
    pub task: Contrastive,
}

/// `0.5 · L_domain + 0.5 · L_task`.
pub fn pcl_total(
    g: &mut Graph,
    c: Var,
    p: Var,
    labels: &[usize],
    domains: &[usize],
    cfg: &SimilarityConfig,
) -> Result<PclOutput> {
    let domain = pcl_domain(g, c, domains, cfg)?;
    let task = pcl_task(g, p, labels, domains, cfg)?;
    let sum = g.add(domain.loss, task.loss)?;
    let loss = g.scale(sum, 0.5);
    Ok(PclOutput { loss, domain, task })
}

/// Positives share the anchor's class, whatever their domain.
pub fn cci(g: &mut Graph, x_n: Var, labels: &[usize], cfg: &SimilarityConfig) -> Result<Contrastive> {
    check_len("cci labels", g.shape(x_n)[0], labels.len())?;
    info_nce(g, x_n, |i, j| labels[i] == labels[j], cfg)
}

/// Mean cross-entropy of `logits: [b, C]` against integer labels.
pub fn cls_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let [b, classes] = *g.shape(logits) else {
        return Err(Error::Shape(format!("logits {:?} are not [b, C]", g.shape(logits))));
    };
    check_len("cls_loss labels", b, labels.len())?;
    let mut pick = vec![0.0; b * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Config(format!("label {y} out of range for {classes} classes")));
        }
        pick[i * classes + y] = -1.0 / b as f64;
    }
    let lp = g.log_softmax(logits);
    let pick = g.constant(&[b, classes], pick)?;
    let picked = g.mul(lp, pick)?;
    Ok(g.sum(picked))
}

/// Loss components of one step; absent auxiliaries contribute nothing.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: Var,
    pub pcl: Option<Var>,
    pub cci: Option<Var>,
}

/// `L_cls + λ_PCL · L_PCL + λ_CCI · L_CCI`.
pub fn total_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let named = [("classification", Some(parts.cls)), ("pcl", parts.pcl), ("cci", parts.cci)];
    for (name, v) in named {
        if let Some(v) = v {
            if !g.scalar_value(v).is_finite() {
                return Err(Error::NonFinite {
                    component: format!("{name} loss"),
                });
            }
        }
    }
    let mut total = parts.cls;
    if let Some(p) = parts.pcl {
        let w = g.scale(p, weights.lambda_pcl);
        total = g.add(total, w)?;
    }
    if let Some(c) = parts.cci {
        let w = g.scale(c, weights.lambda_cci);
        total = g.add(total, w)?;
    }
    Ok(total)
}

/// Straight-line reference implementations in plain `f64`: every `(i, j, k)`
/// term is enumerated and exponentiated directly, no log-sum-exp.
pub mod oracle {
    use super::SimilarityConfig;

    fn similarity(a: &[f64], b: &[f64], normalize: bool) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        if !normalize {
            return dot;
        }
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(super::NORM_EPS);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(super::NORM_EPS);
        dot / (na * nb)
    }

    /// Multi-positive InfoNCE; `None` when no anchor has a positive.
    pub fn contrastive(z: &[Vec<f64>], positive: impl Fn(usize, usize) -> bool, cfg: &SimilarityConfig) -> Option<f64> {
        let b = z.len();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..b {
            let mut denom = 0.0;
            for k in 0..b {
                if k != i {
                    denom += (similarity(&z[i], &z[k], cfg.normalize) / cfg.temperature).exp();
                }
            }
            let mut sum = 0.0;
            let mut count = 0;
            for j in 0..b {
                if j != i && positive(i, j) {
                    let num = (similarity(&z[i], &z[j], cfg.normalize) / cfg.temperature).exp();
                    sum += -(num / denom).ln();
                    count += 1;
                }
            }
            if count > 0 {
                total += sum / count as f64;
                anchors += 1;
            }
        }
        (anchors > 0).then(|| total / anchors as f64)
    }

    pub fn pcl_domain(c: &[Vec<f64>], domains: &[usize], cfg: &SimilarityConfig) -> Option<f64> {
        contrastive(c, |i, j| domains[i] == domains[j], cfg)
    }

    pub fn pcl_task(p: &[Vec<f64>], labels: &[usize], domains: &[usize], cfg: &SimilarityConfig) -> Option<f64> {
        contrastive(p, |i, j| labels[i] == labels[j] && domains[i] == domains[j], cfg)
    }

    pub fn cci(x: &[Vec<f64>], labels: &[usize], cfg: &SimilarityConfig) -> Option<f64> {
        contrastive(x, |i, j| labels[i] == labels[j], cfg)
    }

    pub fn cls_loss(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.iter().zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[y].exp() / z).ln();
        }
        total / labels.len() as f64
    }
}
