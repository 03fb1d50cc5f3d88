//! Read-only evaluation: unseen-domain accuracy, centroid distances between
//! domains, nearest-neighbour purity of the prompts, and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::Exec;
use crate::metrics::MetricRecord;
use crate::model::{Method, Model};
use crate::synth::{self, Dataset, LabeledBatch, Sample};
use crate::trainer::model_from_checkpoint;

const CHUNK: usize = 64;

/// Per-sample outputs of a forward pass, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub classes: usize,
    /// `[n, d]` final class-token features.
    pub x_n: Vec<f64>,
    /// `[n, classes]`
    pub logits: Vec<f64>,
    /// `[n, d]` first-level prompts; absent for the baseline.
    pub domain_prompts: Option<Vec<f64>>,
    /// `[n, d]` second-level prompts; absent for the baseline.
    pub task_prompts: Option<Vec<f64>>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.chunks(self.classes).map(argmax).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `model` over `samples` without building gradients.
pub fn embed(model: &Model, samples: &[&Sample], exec: Exec) -> Result<Embeddings> {
    let d = model.vit.config.embed_dim;
    let classes = model.vit.config.num_classes;
    let prompted = model.method == Method::Hcvp;
    let mut out = Embeddings {
        dim: d,
        classes,
        x_n: Vec::with_capacity(samples.len() * d),
        logits: Vec::with_capacity(samples.len() * classes),
        domain_prompts: prompted.then(Vec::new),
        task_prompts: prompted.then(Vec::new),
        labels: Vec::with_capacity(samples.len()),
        domains: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(CHUNK) {
        let batch = LabeledBatch::from_samples(chunk.iter().copied())?;
        let mut g = Graph::with_exec(exec);
        let x = g.constant(batch.images.shape(), batch.images.data().to_vec())?;
        let fwd = model.forward(&mut g, x)?;
        out.x_n.extend_from_slice(g.value(fwd.x_n));
        out.logits.extend_from_slice(g.value(fwd.logits));
        if let (Some(p), Some(dp), Some(tp)) = (fwd.prompts, out.domain_prompts.as_mut(), out.task_prompts.as_mut()) {
            dp.extend_from_slice(g.value(p.domain));
            tp.extend_from_slice(g.value(p.task));
        }
        out.labels.extend_from_slice(&batch.labels);
        out.domains.extend_from_slice(&batch.domains);
    }
    Ok(out)
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fails if any unseen-domain sample was part of the training or validation
/// split, or any held-out sample comes from a source domain.
pub fn check_leakage(plan: &synth::SplitPlan, data: &Dataset) -> Result<()> {
    let seen: std::collections::HashSet<u64> = plan.train.iter().chain(&plan.val).copied().collect();
    for &id in &plan.test {
        if seen.contains(&id) {
            return Err(Error::Leakage(format!("test sample {id} is also a training or validation sample")));
        }
        let s = data
            .get(id)
            .ok_or_else(|| Error::Leakage(format!("test sample {id} missing from the dataset")))?;
        if s.domain != plan.unseen_domain {
            return Err(Error::Leakage(format!(
                "test sample {id} belongs to source domain {}",
                s.domain
            )));
        }
    }
    for &id in &seen {
        if data.get(id).is_some_and(|s| s.domain == plan.unseen_domain) {
            return Err(Error::Leakage(format!(
                "sample {id} of unseen domain {} is in a source split",
                plan.unseen_domain
            )));
        }
    }
    Ok(())
}

/// Accuracy of a trained checkpoint over the whole unseen domain.
pub fn unseen_accuracy(ckpt: &Checkpoint, data: &Dataset, unseen_domain: usize, exec: Exec) -> Result<f64> {
    if ckpt.config.unseen_domain != unseen_domain {
        return Err(Error::Config(format!(
            "checkpoint was trained with unseen domain {}, not {unseen_domain}",
            ckpt.config.unseen_domain
        )));
    }
    let plan = synth::make_splits(&data.samples, unseen_domain, ckpt.config.seed)?;
    check_leakage(&plan, data)?;
    let model = model_from_checkpoint(ckpt)?;
    let test = data.select(&plan.test)?;
    let e = embed(&model, &test, exec)?;
    accuracy(&e.predictions(), &e.labels)
}

fn l2_normalized(rows: &[f64], dim: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for row in out.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Option<Vec<f64>> {
    let mut c = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        c.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        n += 1;
    }
    (n > 0).then(|| c.into_iter().map(|v| v / n as f64).collect())
}

fn mean_pairwise(centroids: &[Vec<f64>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            sum += euclidean(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

/// Centroid distances between domains in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistanceReport {
    /// How the distance was computed.
    pub metric: String,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub domains: Vec<usize>,
    /// One centroid per entry of `domains`.
    pub centroids: Vec<Vec<f64>>,
    /// Symmetric, zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// `(a, b, distance)` for every unordered pair.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
    /// Mean over classes of the per-class centroid distance; classes present
    /// in fewer than two domains are skipped.
    pub class_conditional_mean: Option<f64>,
}

pub const DISTANCE_METRIC: &str = "euclidean distance between centroids of L2-normalized x_N";

impl DomainDistanceReport {
    pub fn record(&self, step: u64, hash: &str) -> MetricRecord {
        let mut rec = MetricRecord::new(step, "val", self.seed.unwrap_or(0), hash)
            .with_extra("metric", "inter_domain_distance")
            .with_extra("distance_definition", self.metric.clone())
            .with_extra("mean_distance", self.mean)
            .with_extra("class_conditional_distance", self.class_conditional_mean)
            .with_extra("pairs", serde_json::to_value(&self.pairs).expect("pairs serialize"));
        rec.method = self.method.clone();
        rec
    }
}

/// Distances between the centroids of `expected_domains` over L2-normalized
/// `features` (`[n, dim]`).
pub fn domain_distance(
    features: &[f64],
    dim: usize,
    domains: &[usize],
    labels: &[usize],
    expected_domains: &[usize],
) -> Result<DomainDistanceReport> {
    if dim == 0 || features.len() != domains.len() * dim || labels.len() != domains.len() {
        return Err(Error::Shape(format!(
            "{} features of width {dim} for {} domains and {} labels",
            features.len(),
            domains.len(),
            labels.len()
        )));
    }
    let mut expected = expected_domains.to_vec();
    expected.sort_unstable();
    expected.dedup();
    if expected.len() < 2 {
        return Err(Error::Config("inter-domain distance needs at least two domains".into()));
    }
    let normed = l2_normalized(features, dim);
    let rows: Vec<&[f64]> = normed.chunks(dim).collect();
    let mut centroids = Vec::with_capacity(expected.len());
    for &d in &expected {
        let c = centroid(rows.iter().zip(domains).filter(|(_, &x)| x == d).map(|(r, _)| *r), dim)
            .ok_or_else(|| Error::Config(format!("domain {d} has no samples")))?;
        centroids.push(c);
    }
    let k = expected.len();
    let mut matrix = vec![vec![0.0; k]; k];
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let dist = euclidean(&centroids[i], &centroids[j]);
            matrix[i][j] = dist;
            matrix[j][i] = dist;
            pairs.push((expected[i], expected[j], dist));
        }
    }
    let mean = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;

    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let per_class: Vec<f64> = classes
        .iter()
        .filter_map(|&y| {
            let cs: Vec<Vec<f64>> = expected
                .iter()
                .filter_map(|&d| {
                    centroid(
                        rows.iter()
                            .zip(domains.iter().zip(labels))
                            .filter(|(_, (&dd, &yy))| dd == d && yy == y)
                            .map(|(r, _)| *r),
                        dim,
                    )
                })
                .collect();
            mean_pairwise(&cs)
        })
        .collect();
    let class_conditional_mean = (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64);

    Ok(DomainDistanceReport {
        metric: DISTANCE_METRIC.to_string(),
        method: None,
        seed: None,
        domains: expected,
        centroids,
        matrix,
        pairs,
        mean,
        class_conditional_mean,
    })
}

/// Source domains of `data` with `unseen` removed.
pub fn source_domains(data: &Dataset, unseen: usize) -> Vec<usize> {
    (0..data.config.domains).filter(|&d| d != unseen).collect()
}

/// Distance report of a checkpoint over its source-domain validation split.
pub fn inter_domain_distance(ckpt: &Checkpoint, data: &Dataset, exec: Exec) -> Result<DomainDistanceReport> {
    let model = model_from_checkpoint(ckpt)?;
    let plan = synth::make_splits(&data.samples, ckpt.config.unseen_domain, ckpt.config.seed)?;
    let val = data.select(&plan.val)?;
    let e = embed(&model, &val, exec)?;
    let mut report = domain_distance(
        &e.x_n,
        e.dim,
        &e.domains,
        &e.labels,
        &source_domains(data, ckpt.config.unseen_domain),
    )?;
    report.method = Some(ckpt.config.method.to_string());
    report.seed = Some(ckpt.config.seed);
    Ok(report)
}

/// Leave-one-out 1-nearest-neighbour agreement: the share of rows whose
/// closest other row (Euclidean, ties to the lower index) has the same key.
pub fn purity<K: PartialEq>(vectors: &[f64], dim: usize, keys: &[K]) -> Result<f64> {
    if dim == 0 || vectors.len() != keys.len() * dim {
        return Err(Error::Shape(format!(
            "{} values of width {dim} for {} keys",
            vectors.len(),
            keys.len()
        )));
    }
    let n = keys.len();
    if n < 2 {
        return Err(Error::Config("purity needs at least two vectors".into()));
    }
    let rows: Vec<&[f64]> = vectors.chunks(dim).collect();
    let mut agree = 0usize;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i) {
            let d2: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        if keys[best.1] == keys[i] {
            agree += 1;
        }
    }
    Ok(agree as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub domain_purity: f64,
    /// Task prompts scored against `(class, domain)` pairs.
    pub task_purity: f64,
}

/// Prompt purity of an already-built model over `samples`.
pub fn prompt_purity(model: &Model, samples: &[&Sample], exec: Exec) -> Result<ClusterScore> {
    if model.method != Method::Hcvp {
        return Err(Error::NotApplicable(format!(
            "the {} model has no prompts to cluster",
            model.method
        )));
    }
    let e = embed(model, samples, exec)?;
    let cells: Vec<(usize, usize)> = e.labels.iter().copied().zip(e.domains.iter().copied()).collect();
    let (Some(dp), Some(tp)) = (&e.domain_prompts, &e.task_prompts) else {
        return Err(Error::Contract("prompted model produced no prompts".into()));
    };
    Ok(ClusterScore {
        domain_purity: purity(dp, e.dim, &e.domains)?,
        task_purity: purity(tp, e.dim, &cells)?,
    })
}

/// Prompt purity of a checkpoint over its source-domain validation split.
pub fn prompt_cluster_score(ckpt: &Checkpoint, data: &Dataset, exec: Exec) -> Result<ClusterScore> {
    if ckpt.config.method != Method::Hcvp {
        return Err(Error::NotApplicable(format!(
            "the {} checkpoint has no prompts to cluster",
            ckpt.config.method
        )));
    }
    let model = model_from_checkpoint(ckpt)?;
    let plan = synth::make_splits(&data.samples, ckpt.config.unseen_domain, ckpt.config.seed)?;
    prompt_purity(&model, &data.select(&plan.val)?, exec)
}

/// Which vectors an embedding file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    XN,
    DomainPrompt,
    TaskPrompt,
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x_n" | "xn" => Ok(EmbeddingKind::XN),
            "domain_prompt" | "domain" => Ok(EmbeddingKind::DomainPrompt),
            "task_prompt" | "task" => Ok(EmbeddingKind::TaskPrompt),
            other => Err(Error::Config(format!(
                "unknown embedding kind `{other}` (expected x_n, domain_prompt or task_prompt)"
            ))),
        }
    }
}

/// Nine significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

/// Renders `rows` (`[n, dim]`) as CSV with `f0..f{dim-1},class,domain` columns.
pub fn embeddings_csv(rows: &[f64], dim: usize, labels: &[usize], domains: &[usize]) -> Result<String> {
    if dim == 0 || rows.len() != labels.len() * dim || labels.len() != domains.len() {
        return Err(Error::Shape("embedding rows, labels and domains disagree".into()));
    }
    let mut out = String::new();
    for k in 0..dim {
        let _ = write!(out, "f{k},");
    }
    out.push_str("class,domain\n");
    for ((row, y), d) in rows.chunks(dim).zip(labels).zip(domains) {
        for v in row {
            out.push_str(&format_value(*v));
            out.push(',');
        }
        let _ = writeln!(out, "{y},{d}");
    }
    Ok(out)
}

/// Writes the chosen vectors of `model` over `samples` to `path`.
pub fn export_embeddings(
    model: &Model,
    samples: &[&Sample],
    kind: EmbeddingKind,
    path: &Path,
    exec: Exec,
) -> Result<usize> {
    let e = embed(model, samples, exec)?;
    let rows = match kind {
        EmbeddingKind::XN => &e.x_n,
        EmbeddingKind::DomainPrompt => e
            .domain_prompts
            .as_ref()
            .ok_or_else(|| Error::NotApplicable("the baseline has no domain prompts".into()))?,
        EmbeddingKind::TaskPrompt => e
            .task_prompts
            .as_ref()
            .ok_or_else(|| Error::NotApplicable("the baseline has no task prompts".into()))?,
    };
    let csv = embeddings_csv(rows, e.dim, &e.labels, &e.domains)?;
    let mut f = std::fs::File::create(path).map_err(|err| Error::io(path, err))?;
    f.write_all(csv.as_bytes()).map_err(|err| Error::io(path, err))?;
    Ok(e.len())
}

/// Parsed embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2..] != ["class", "domain"] {
        return Err(Error::format(path, "header must end with class,domain"));
    }
    let dim = cols.len() - 2;
    let mut t = EmbeddingTable {
        dim,
        rows: Vec::new(),
        labels: Vec::new(),
        domains: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::format(path, format!("row {} has {} fields", i + 1, fields.len())));
        }
        let bad = |what: &str| Error::format(path, format!("row {}: malformed {what}", i + 1));
        for f in &fields[..dim] {
            t.rows.push(f.parse().map_err(|_| bad("value"))?);
        }
        t.labels.push(fields[dim].parse().map_err(|_| bad("class"))?);
        t.domains.push(fields[dim + 1].parse().map_err(|_| bad("domain"))?);
    }
    Ok(t)
}

/// Mean of `values`, grouped by key.
pub fn group_mean<K: Ord + Clone>(values: impl IntoIterator<Item = (K, f64)>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in values {
        let e = acc.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
