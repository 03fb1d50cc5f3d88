//! Optimization loop for the prompt-conditioned model and the plain baseline.
//!
//! One run is strictly sequential: batches come from the deterministic
//! sampler in [`crate::synth::batches`], so `(config, dataset)` fixes every
//! number a run emits. Independent runs may execute in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hpgn::FeatureExtractor;
use crate::kernels::Exec;
use crate::losses::{self, LossParts, LossWeights, SimilarityConfig};
use crate::metrics::{LossRecord, MetricRecord, MetricsLog};
use crate::model::{Method, Model};
use crate::nn::{join, load_grads, Linear, Parameterized};
use crate::optim::{AdamWConfig, AdamWState};
use crate::synth::{self, Dataset, LabeledBatch, Sample, SplitPlan};
use crate::tensor::Tensor;
use crate::vit::VitConfig;

/// Which auxiliary losses take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub use_pcl: bool,
    pub use_cci: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_pcl: true,
        use_cci: true,
    };
    pub const NO_PCL: Ablation = Ablation {
        use_pcl: false,
        use_cci: true,
    };
    pub const NO_CCI: Ablation = Ablation {
        use_pcl: true,
        use_cci: false,
    };
    pub const VANILLA: Ablation = Ablation {
        use_pcl: false,
        use_cci: false,
    };
    pub const ALL: [Ablation; 4] = [Self::FULL, Self::NO_PCL, Self::NO_CCI, Self::VANILLA];

    pub fn name(&self) -> &'static str {
        match (self.use_pcl, self.use_cci) {
            (true, true) => "full",
            (false, true) => "w/o pcl",
            (true, false) => "w/o cci",
            (false, false) => "vanilla",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub similarity: SimilarityConfig,
    pub ablation: Ablation,
    pub seed: u64,
    pub unseen_domain: usize,
    /// Validation period in steps; the last step is always evaluated.
    pub eval_every: u64,
    /// Classification steps used to pretrain the frozen extractor.
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub vit: VitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Hcvp,
            steps: 2000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            similarity: SimilarityConfig::default(),
            ablation: Ablation::FULL,
            seed: 0,
            unseen_domain: 3,
            eval_every: 100,
            pretrain_steps: 300,
            pretrain_lr: 1e-3,
            vit: VitConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against `data` and materializes derived
    /// settings. The baseline never computes auxiliary losses.
    pub fn resolve(&self, data: &Dataset) -> Result<TrainConfig> {
        let mut c = self.clone();
        c.vit.num_classes = data.config.classes;
        if c.method == Method::Erm {
            c.ablation = Ablation::VANILLA;
        }
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(c.steps > 0, "steps must be positive")?;
        check(c.eval_every > 0, "eval_every must be positive")?;
        check(c.batch_size >= 4 && c.batch_size % 2 == 0, "batch size must be even and at least 4")?;
        check(
            c.unseen_domain < data.config.domains,
            &format!("unseen domain {} does not exist", c.unseen_domain),
        )?;
        for (name, v) in [("lambda_pcl", c.weights.lambda_pcl), ("lambda_cci", c.weights.lambda_cci)] {
            check(v.is_finite() && v >= 0.0, &format!("{name} must be finite and non-negative"))?;
        }
        check(
            c.similarity.temperature.is_finite() && c.similarity.temperature > 0.0,
            "temperature must be positive",
        )?;
        check(c.optimizer.lr > 0.0 && c.optimizer.lr.is_finite(), "learning rate must be positive")?;
        check(c.pretrain_lr > 0.0 && c.pretrain_lr.is_finite(), "pretraining learning rate must be positive")?;
        c.vit.validate()?;
        Ok(c)
    }

    /// Short content hash of the configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn computes_pcl(&self) -> bool {
        self.method == Method::Hcvp && self.ablation.use_pcl && self.weights.lambda_pcl > 0.0
    }

    pub fn computes_cci(&self) -> bool {
        self.method == Method::Hcvp && self.ablation.use_cci && self.weights.lambda_cci > 0.0
    }
}

/// How often each auxiliary loss was built into a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounters {
    pub pcl_evaluations: u64,
    pub cci_evaluations: u64,
    pub degenerate_domain_batches: u64,
    pub degenerate_task_batches: u64,
    pub degenerate_cci_batches: u64,
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub cls: f64,
    pub pcl: Option<f64>,
    pub pcl_domain: Option<f64>,
    pub pcl_task: Option<f64>,
    pub cci: Option<f64>,
    pub total: f64,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub final_loss: f64,
    /// Accuracy of the throwaway head on the pooled source training split.
    pub accuracy: f64,
}

struct PretrainNet {
    extractor: FeatureExtractor,
    head: Linear,
}

impl Parameterized for PretrainNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl PretrainNet {
    fn logits(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let f = self.extractor.forward(g, images)?;
        let pooled = g.gap(f)?;
        self.head.forward(g, pooled)
    }
}

const PRETRAIN_SALT: u64 = 0x7072_6574_7261_696e;
const EVAL_CHUNK: usize = 64;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy_of(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn images_var(g: &mut Graph, batch: &LabeledBatch) -> Result<Var> {
    g.constant(batch.images.shape(), batch.images.data().to_vec())
}

/// Trains the extractor as a plain classifier on the pooled source training
/// split, then freezes it.
pub fn pretrain_extractor(
    config: &TrainConfig,
    data: &Dataset,
    plan: &SplitPlan,
    exec: Exec,
) -> Result<(FeatureExtractor, PretrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PRETRAIN_SALT);
    let extractor = FeatureExtractor::new(&mut rng);
    let head = Linear::new(extractor.out_channels(), data.config.classes, &mut rng);
    let mut net = PretrainNet { extractor, head };
    let mut opt = AdamWState::new(AdamWConfig {
        lr: config.pretrain_lr,
        ..config.optimizer
    });
    let train = data.select(&plan.train)?;
    let mut final_loss = f64::NAN;
    let mut epoch = 0;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for _ in 0..config.pretrain_steps {
        if queue.is_empty() {
            queue = synth::batches(&train, config.batch_size, config.seed ^ PRETRAIN_SALT, epoch)?;
            queue.reverse();
            epoch += 1;
        }
        let positions = queue.pop().expect("non-empty epoch");
        let batch = LabeledBatch::from_samples(positions.iter().map(|&p| train[p]))?;
        let mut g = Graph::with_exec(exec);
        let x = images_var(&mut g, &batch)?;
        let logits = net.logits(&mut g, x)?;
        let loss = losses::cls_loss(&mut g, logits, &batch.labels)?;
        final_loss = g.scalar_value(loss);
        if !final_loss.is_finite() {
            return Err(Error::NonFinite {
                component: "extractor pretraining loss".into(),
            });
        }
        g.backward(loss)?;
        load_grads(&g, &mut net);
        opt.step_params(&mut net)?;
    }
    let mut correct = 0.0;
    for chunk in train.chunks(EVAL_CHUNK) {
        let batch = LabeledBatch::from_samples(chunk.iter().copied())?;
        let mut g = Graph::with_exec(exec);
        let x = images_var(&mut g, &batch)?;
        let logits = net.logits(&mut g, x)?;
        correct += accuracy_of(g.value(logits), data.config.classes, &batch.labels) * batch.len() as f64;
    }
    let mut extractor = net.extractor;
    extractor.freeze();
    Ok((
        extractor,
        PretrainReport {
            steps: config.pretrain_steps,
            final_loss,
            accuracy: correct / train.len() as f64,
        },
    ))
}

/// Forward-only evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub accuracy: f64,
    pub cls_loss: f64,
}

/// Mean losses over the steps since the previous evaluation.
#[derive(Debug, Default)]
struct Window {
    n: u64,
    cls: f64,
    pcl: f64,
    pcl_domain: f64,
    pcl_task: f64,
    cci: f64,
    total: f64,
    acc: f64,
}

impl Window {
    fn add(&mut self, s: &StepLosses) {
        self.n += 1;
        self.cls += s.cls;
        self.pcl += s.pcl.unwrap_or(0.0);
        self.pcl_domain += s.pcl_domain.unwrap_or(0.0);
        self.pcl_task += s.pcl_task.unwrap_or(0.0);
        self.cci += s.cci.unwrap_or(0.0);
        self.total += s.total;
        self.acc += s.batch_accuracy;
    }
}

/// Result of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub config_hash: String,
    pub history: Vec<StepLosses>,
    pub records: Vec<MetricRecord>,
    pub best_val_accuracy: f64,
    pub best_step: u64,
    pub counters: LossCounters,
    pub pretrain: Option<PretrainReport>,
}

/// Mutable state of one training run.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    hash: String,
    pub model: Model,
    optimizer: AdamWState,
    plan: SplitPlan,
    step: u64,
    epoch: u64,
    cursor: usize,
    epoch_batches: Vec<Vec<usize>>,
    best: Option<Box<Checkpoint>>,
    /// `(accuracy, step)` of the best validation so far; survives a resume
    /// even though the best parameters themselves do not.
    best_score: Option<(f64, u64)>,
    counters: LossCounters,
    pretrain: Option<PretrainReport>,
    exec: Exec,
}

struct BuiltLoss {
    total: Var,
    cls: Var,
    logits: Var,
    pcl: Option<losses::PclOutput>,
    cci: Option<losses::Contrastive>,
}

impl Trainer {
    /// Builds a fresh run: splits the data, pretrains and freezes the
    /// extractor (prompted method only) and initializes the model.
    pub fn new(config: &TrainConfig, data: &Dataset) -> Result<Self> {
        Self::with_exec(config, data, Exec::default())
    }

    pub fn with_exec(config: &TrainConfig, data: &Dataset, exec: Exec) -> Result<Self> {
        let config = config.resolve(data)?;
        let plan = synth::make_splits(&data.samples, config.unseen_domain, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, pretrain) = match config.method {
            Method::Hcvp => {
                let (extractor, report) = pretrain_extractor(&config, data, &plan, exec)?;
                (Model::hcvp(extractor, config.vit, &mut rng)?, Some(report))
            }
            Method::Erm => (Model::erm(config.vit, &mut rng)?, None),
        };
        let opt = AdamWState::new(config_opt(&config));
        Self::assemble(config, data, plan, model, opt, pretrain, exec)
    }

    /// Uses an already-built model (its frozen tensors stay frozen).
    pub fn with_model(config: &TrainConfig, data: &Dataset, model: Model, exec: Exec) -> Result<Self> {
        let config = config.resolve(data)?;
        if model.method != config.method {
            return Err(Error::Config(format!(
                "model is {} but the configuration asks for {}",
                model.method, config.method
            )));
        }
        let plan = synth::make_splits(&data.samples, config.unseen_domain, config.seed)?;
        let opt = AdamWState::new(config_opt(&config));
        Self::assemble(config, data, plan, model, opt, None, exec)
    }

    fn assemble(
        config: TrainConfig,
        data: &Dataset,
        plan: SplitPlan,
        model: Model,
        optimizer: AdamWState,
        pretrain: Option<PretrainReport>,
        exec: Exec,
    ) -> Result<Self> {
        if plan.train.len() < config.batch_size {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {} training samples",
                config.batch_size,
                plan.train.len()
            )));
        }
        if let Some(ex) = model.extractor() {
            if !ex.is_frozen() {
                return Err(Error::Contract("feature extractor must be frozen before training".into()));
            }
        }
        let _ = data;
        Ok(Trainer {
            hash: config.hash(),
            config,
            model,
            optimizer,
            plan,
            step: 0,
            epoch: 0,
            cursor: 0,
            epoch_batches: Vec::new(),
            best: None,
            best_score: None,
            counters: LossCounters::default(),
            pretrain,
            exec,
        })
    }

    /// Resumes from a checkpoint taken by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &Dataset, exec: Exec) -> Result<Self> {
        let config = ckpt.config.resolve(data)?;
        if config.hash() != ckpt.config_hash {
            return Err(Error::Config("checkpoint configuration hash does not match its contents".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = match config.method {
            Method::Hcvp => {
                let mut ex = FeatureExtractor::new(&mut rng);
                ex.freeze();
                Model::hcvp(ex, config.vit, &mut rng)?
            }
            Method::Erm => Model::erm(config.vit, &mut rng)?,
        };
        ckpt.restore_params(&mut model)?;
        let optimizer = ckpt.optimizer.clone().unwrap_or_else(|| AdamWState::new(config_opt(&config)));
        let plan = synth::make_splits(&data.samples, config.unseen_domain, config.seed)?;
        let mut t = Self::assemble(config, data, plan, model, optimizer, None, exec)?;
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.cursor = ckpt.cursor;
        if ckpt.cursor > 0 {
            let train = data.select(&t.plan.train)?;
            t.epoch_batches = synth::batches(&train, t.config.batch_size, t.config.seed, t.epoch)?;
        }
        t.best_score = ckpt.best_val_accuracy.zip(ckpt.best_step);
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn plan(&self) -> &SplitPlan {
        &self.plan
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn counters(&self) -> LossCounters {
        self.counters
    }

    pub fn pretrain_report(&self) -> Option<PretrainReport> {
        self.pretrain
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        let (manifest, values) = Checkpoint::capture_params(&self.model);
        Checkpoint {
            config: self.config.clone(),
            config_hash: self.hash.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            best_val_accuracy: self.best_score.map(|b| b.0),
            best_step: self.best_score.map(|b| b.1),
            manifest,
            values,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// The state with the highest validation accuracy seen by this process.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_deref()
    }

    fn next_batch(&mut self, train: &[&Sample]) -> Result<Vec<usize>> {
        if self.cursor == 0 || self.cursor >= self.epoch_batches.len() {
            if self.cursor != 0 {
                self.epoch += 1;
            }
            self.epoch_batches = synth::batches(train, self.config.batch_size, self.config.seed, self.epoch)?;
            self.cursor = 0;
        }
        let b = self.epoch_batches[self.cursor].clone();
        self.cursor += 1;
        Ok(b)
    }

    fn build_loss(&mut self, g: &mut Graph, batch: &LabeledBatch) -> Result<BuiltLoss> {
        let x = images_var(g, batch)?;
        let fwd = self.model.forward(g, x)?;
        let cls = losses::cls_loss(g, fwd.logits, &batch.labels)?;
        let mut parts = LossParts { cls, pcl: None, cci: None };
        let mut pcl = None;
        let mut cci = None;
        if self.config.computes_pcl() {
            let prompts = fwd
                .prompts
                .ok_or_else(|| Error::Contract("prompt losses need a prompted model".into()))?;
            let out = losses::pcl_total(
                g,
                prompts.domain,
                prompts.task,
                &batch.labels,
                &batch.domains,
                &self.config.similarity,
            )?;
            self.counters.pcl_evaluations += 1;
            self.counters.degenerate_domain_batches += out.domain.degenerate as u64;
            self.counters.degenerate_task_batches += out.task.degenerate as u64;
            parts.pcl = Some(out.loss);
            pcl = Some(out);
        }
        if self.config.computes_cci() {
            let out = losses::cci(g, fwd.x_n, &batch.labels, &self.config.similarity)?;
            self.counters.cci_evaluations += 1;
            self.counters.degenerate_cci_batches += out.degenerate as u64;
            parts.cci = Some(out.loss);
            cci = Some(out);
        }
        let weights = LossWeights {
            lambda_pcl: if parts.pcl.is_some() { self.config.weights.lambda_pcl } else { 0.0 },
            lambda_cci: if parts.cci.is_some() { self.config.weights.lambda_cci } else { 0.0 },
        };
        let total = losses::total_loss(g, &parts, &weights)?;
        Ok(BuiltLoss {
            total,
            cls,
            logits: fwd.logits,
            pcl,
            cci,
        })
    }

    /// Runs one optimization step on the next training batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLosses> {
        let train = data.select(&self.plan.train)?;
        let positions = self.next_batch(&train)?;
        let batch = LabeledBatch::from_samples(positions.iter().map(|&p| train[p]))?;
        let mut g = Graph::with_exec(self.exec);
        let built = self.build_loss(&mut g, &batch)?;
        let out = StepLosses {
            step: self.step + 1,
            cls: g.scalar_value(built.cls),
            pcl: built.pcl.map(|p| g.scalar_value(p.loss)),
            pcl_domain: built.pcl.map(|p| g.scalar_value(p.domain.loss)),
            pcl_task: built.pcl.map(|p| g.scalar_value(p.task.loss)),
            cci: built.cci.map(|c| g.scalar_value(c.loss)),
            total: g.scalar_value(built.total),
            batch_accuracy: accuracy_of(g.value(built.logits), self.config.vit.num_classes, &batch.labels),
        };
        g.backward(built.total)?;
        load_grads(&g, &mut self.model);
        drop(g);
        self.optimizer.step_params(&mut self.model)?;
        self.step += 1;
        Ok(out)
    }

    /// Classification accuracy and loss over `ids`, without gradients.
    pub fn evaluate(&self, data: &Dataset, ids: &[u64]) -> Result<EvalSummary> {
        evaluate_model(&self.model, data, ids, self.exec)
    }

    /// Trains until the configured number of steps, validating every
    /// `eval_every` steps and retaining the best validation state.
    pub fn run(&mut self, data: &Dataset, log: &mut MetricsLog) -> Result<RunSummary> {
        let mut history = Vec::with_capacity((self.config.steps - self.step.min(self.config.steps)) as usize);
        let mut window = Window::default();
        let method = self.config.method.to_string();
        while self.step < self.config.steps {
            let s = self.train_step(data)?;
            window.add(&s);
            history.push(s);
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                let n = window.n.max(1) as f64;
                let pcl_on = self.config.computes_pcl();
                let cci_on = self.config.computes_cci();
                let mut rec = MetricRecord::new(self.step, "train", self.config.seed, &self.hash);
                rec.method = Some(method.clone());
                rec.loss = LossRecord {
                    cls: Some(window.cls / n),
                    pcl: pcl_on.then_some(window.pcl / n),
                    pcl_domain: pcl_on.then_some(window.pcl_domain / n),
                    pcl_task: pcl_on.then_some(window.pcl_task / n),
                    cci: cci_on.then_some(window.cci / n),
                    weighted_pcl: if pcl_on { self.config.weights.lambda_pcl * window.pcl / n } else { 0.0 },
                    weighted_cci: if cci_on { self.config.weights.lambda_cci * window.cci / n } else { 0.0 },
                    total: Some(window.total / n),
                };
                rec.accuracy = Some(window.acc / n);
                log.push(rec)?;
                window = Window::default();

                let val = self.evaluate(data, &self.plan.val)?;
                let mut rec = MetricRecord::new(self.step, "val", self.config.seed, &self.hash);
                rec.method = Some(method.clone());
                rec.loss.cls = Some(val.cls_loss);
                rec.accuracy = Some(val.accuracy);
                log.push(rec)?;
                if self.best_score.is_none_or(|(best, _)| val.accuracy > best) {
                    self.best_score = Some((val.accuracy, self.step));
                    self.best = Some(Box::new(self.checkpoint()));
                }
            }
        }
        let (best_val_accuracy, best_step) =
            self.best_score.ok_or_else(|| Error::Config("run finished without validation".into()))?;
        Ok(RunSummary {
            config: self.config.clone(),
            config_hash: self.hash.clone(),
            history,
            records: log.records().to_vec(),
            best_val_accuracy,
            best_step,
            counters: self.counters,
            pretrain: self.pretrain,
        })
    }
}

fn config_opt(config: &TrainConfig) -> AdamWConfig {
    config.optimizer
}

/// Forward-only accuracy and classification loss of `model` over `ids`.
pub fn evaluate_model(model: &Model, data: &Dataset, ids: &[u64], exec: Exec) -> Result<EvalSummary> {
    if ids.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let samples = data.select(ids)?;
    let (mut correct, mut loss) = (0.0, 0.0);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch = LabeledBatch::from_samples(chunk.iter().copied())?;
        let mut g = Graph::with_exec(exec);
        let x = images_var(&mut g, &batch)?;
        let fwd = model.forward(&mut g, x)?;
        let l = losses::cls_loss(&mut g, fwd.logits, &batch.labels)?;
        loss += g.scalar_value(l) * batch.len() as f64;
        correct += accuracy_of(g.value(fwd.logits), model.vit.config.num_classes, &batch.labels) * batch.len() as f64;
    }
    let n = samples.len() as f64;
    Ok(EvalSummary {
        samples: samples.len(),
        accuracy: correct / n,
        cls_loss: loss / n,
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let config = &ckpt.config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match config.method {
        Method::Hcvp => {
            let mut ex = FeatureExtractor::new(&mut rng);
            ex.freeze();
            Model::hcvp(ex, config.vit, &mut rng)?
        }
        Method::Erm => Model::erm(config.vit, &mut rng)?,
    };
    ckpt.restore_params(&mut model)?;
    Ok(model)
}

/// One finished run of an ablation or sweep.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub unseen_domain: usize,
    pub lambda_pcl: f64,
    pub lambda_cci: f64,
    pub ablation: Ablation,
    pub best_val_accuracy: f64,
    pub unseen_accuracy: f64,
    pub counters: LossCounters,
    #[serde(skip)]
    pub records: Vec<MetricRecord>,
}

/// Trains `config` on `data` and scores its best checkpoint on the unseen domain.
pub fn train_and_score(config: &TrainConfig, data: &Dataset, label: &str, exec: Exec) -> Result<RunOutcome> {
    let mut trainer = Trainer::with_exec(config, data, exec)?;
    let mut log = MetricsLog::in_memory();
    let summary = trainer.run(data, &mut log)?;
    let best = trainer
        .best_checkpoint()
        .ok_or_else(|| Error::Config("run produced no best checkpoint".into()))?;
    let model = model_from_checkpoint(best)?;
    let test = evaluate_model(&model, data, &trainer.plan().test, exec)?;
    let mut rec = MetricRecord::new(summary.best_step, "test", config.seed, &summary.config_hash);
    rec.method = Some(summary.config.method.to_string());
    rec.loss.cls = Some(test.cls_loss);
    rec.accuracy = Some(test.accuracy);
    log.push(rec)?;
    Ok(RunOutcome {
        label: label.to_string(),
        seed: config.seed,
        unseen_domain: summary.config.unseen_domain,
        lambda_pcl: summary.config.weights.lambda_pcl,
        lambda_cci: summary.config.weights.lambda_cci,
        ablation: summary.config.ablation,
        best_val_accuracy: summary.best_val_accuracy,
        unseen_accuracy: test.accuracy,
        counters: summary.counters,
        records: log.into_records(),
    })
}

/// Runs `jobs` closures, at most `parallelism` at a time, keeping input order.
pub fn run_parallel<T, F>(parallelism: usize, jobs: Vec<F>) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    if parallelism > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        return pool.install(|| jobs.into_par_iter().map(|f| f()).collect());
    }
    let _ = parallelism;
    jobs.into_iter().map(|f| f()).collect()
}

/// The four loss variants over every seed and held-out domain.
#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    /// Column labels: one per held-out domain, then `avg`.
    pub columns: Vec<String>,
    /// One row per variant: name and mean unseen accuracy per column.
    pub rows: Vec<(String, Vec<f64>)>,
    pub runs: Vec<RunOutcome>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = format!("{:<10}", "variant");
        for c in &self.columns {
            out.push_str(&format!("{c:>10}"));
        }
        out.push('\n');
        for (name, vals) in &self.rows {
            out.push_str(&format!("{name:<10}"));
            for v in vals {
                out.push_str(&format!("{:>10.2}", 100.0 * v));
            }
            out.push('\n');
        }
        out
    }

    pub fn row(&self, ablation: Ablation) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(n, _)| n == ablation.name())
            .map(|(_, v)| v.as_slice())
    }
}

/// Trains every ablation variant for every seed and held-out domain.
pub fn ablate(
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    unseen_domains: &[usize],
    parallelism: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() || unseen_domains.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one held-out domain".into()));
    }
    let mut configs = Vec::new();
    for ab in Ablation::ALL {
        for &d in unseen_domains {
            for &seed in seeds {
                let mut c = base.clone();
                c.method = Method::Hcvp;
                c.ablation = ab;
                c.seed = seed;
                c.unseen_domain = d;
                configs.push((ab.name().to_string(), c));
            }
        }
    }
    let exec = if parallelism > 1 { Exec::Sequential } else { Exec::default() };
    let jobs: Vec<_> = configs
        .iter()
        .map(|(label, c)| move || train_and_score(c, data, label, exec))
        .collect();
    let runs = run_parallel(parallelism, jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let mut columns: Vec<String> = unseen_domains.iter().map(|d| format!("->d{d}")).collect();
    columns.push("avg".into());
    let rows = Ablation::ALL
        .iter()
        .map(|ab| {
            let mut vals: Vec<f64> = unseen_domains
                .iter()
                .map(|&d| {
                    let accs: Vec<f64> = runs
                        .iter()
                        .filter(|r| r.ablation == *ab && r.unseen_domain == d)
                        .map(|r| r.unseen_accuracy)
                        .collect();
                    accs.iter().sum::<f64>() / accs.len() as f64
                })
                .collect();
            vals.push(vals.iter().sum::<f64>() / vals.len() as f64);
            (ab.name().to_string(), vals)
        })
        .collect();
    Ok(AblationTable { columns, rows, runs })
}

pub const PCL_GRID: [f64; 5] = [0.001, 0.01, 0.1, 0.5, 1.0];
pub const CCI_GRID: [f64; 5] = [0.01, 0.1, 0.3, 0.6, 1.0];
pub const SWEEP_STEPS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Pcl,
    Cci,
    Both,
}

/// Grid points `(λ_PCL, λ_CCI)`: each axis is swept with the other weight
/// held at its configured value.
pub fn sweep_grid(axis: SweepAxis, base: &LossWeights, pcl: &[f64], cci: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if matches!(axis, SweepAxis::Pcl | SweepAxis::Both) {
        out.extend(pcl.iter().map(|&p| (p, base.lambda_cci)));
    }
    if matches!(axis, SweepAxis::Cci | SweepAxis::Both) {
        out.extend(cci.iter().map(|&c| (base.lambda_pcl, c)));
    }
    out
}

/// Shortened runs over `grid`; one outcome per point, in grid order.
pub fn sweep(base: &TrainConfig, data: &Dataset, grid: &[(f64, f64)], parallelism: usize) -> Result<Vec<RunOutcome>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|&(p, c)| {
            let mut cfg = base.clone();
            cfg.method = Method::Hcvp;
            cfg.weights = LossWeights {
                lambda_pcl: p,
                lambda_cci: c,
            };
            cfg
        })
        .collect();
    let exec = if parallelism > 1 { Exec::Sequential } else { Exec::default() };
    let jobs: Vec<_> = configs
        .iter()
        .map(|c| {
            move || {
                let label = format!("pcl={} cci={}", c.weights.lambda_pcl, c.weights.lambda_cci);
                train_and_score(c, data, &label, exec)
            }
        })
        .collect();
    run_parallel(parallelism, jobs).into_iter().collect()
}
