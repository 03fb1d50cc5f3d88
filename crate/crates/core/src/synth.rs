//! Procedural multi-domain shape dataset.
//!
//! Classes are shapes, domains are rendering styles. The shape geometry is
//! drawn from the same distribution in every domain; only the style, palette
//! and (optionally) a label-correlated corner patch differ.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Side length of the spurious corner patch, in pixels.
pub const PATCH_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    SolidFill,
    Stripes,
    SpeckleNoise,
    OutlineOnly,
}

impl Style {
    pub const ALL: [Style; 4] = [
        Style::SolidFill,
        Style::Stripes,
        Style::SpeckleNoise,
        Style::OutlineOnly,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    /// Signed distance (pixels) from `(x, y)` relative to the shape centre,
    /// for a shape of nominal radius `r`. Negative inside.
    fn sdf(self, x: f64, y: f64, r: f64) -> f64 {
        fn boxd(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
            let dx = x.abs() - hx;
            let dy = y.abs() - hy;
            let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dx.max(dy).min(0.0)
        }
        match self {
            ShapeKind::Disk => (x * x + y * y).sqrt() - r,
            ShapeKind::Square => boxd(x, y, 0.82 * r, 0.82 * r),
            ShapeKind::Triangle => {
                // equilateral, pointing up (image y grows downward), half-side h
                let k = 3f64.sqrt();
                let h = 1.05 * r;
                let mut px = x.abs() - h;
                let mut py = -y + h / k;
                if px + k * py > 0.0 {
                    (px, py) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                }
                px -= px.clamp(-2.0 * h, 0.0);
                -(px * px + py * py).sqrt() * py.signum()
            }
            ShapeKind::Cross => boxd(x, y, r, 0.32 * r).min(boxd(x, y, 0.32 * r, r)),
            ShapeKind::Diamond => (x.abs() + y.abs() - 1.15 * r) / 2f64.sqrt(),
            ShapeKind::Ring => ((x * x + y * y).sqrt() - 0.72 * r).abs() - 0.28 * r,
        }
    }
}

/// Colors used by the spurious patch, one per class.
const CLASS_COLORS: [[f64; 3]; 6] = [
    [0.95, 0.1, 0.1],
    [0.1, 0.85, 0.1],
    [0.1, 0.2, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub style: Style,
    /// `palette[0]` is the background, the rest are foreground colors.
    pub palette: Vec<[f64; 3]>,
    /// Probability the corner patch shows the label's color; no patch when `None`.
    pub spurious_correlation: Option<f64>,
}

fn palette_for(style: Style) -> Vec<[f64; 3]> {
    match style {
        Style::SolidFill => vec![[0.12, 0.12, 0.28], [0.95, 0.6, 0.2], [0.9, 0.85, 0.3], [0.95, 0.4, 0.35]],
        Style::Stripes => vec![[0.82, 0.82, 0.78], [0.25, 0.3, 0.6], [0.55, 0.2, 0.45], [0.2, 0.45, 0.4]],
        Style::SpeckleNoise => vec![[0.3, 0.42, 0.3], [0.85, 0.8, 0.7], [0.7, 0.75, 0.9], [0.9, 0.7, 0.75]],
        Style::OutlineOnly => vec![[0.93, 0.9, 0.82], [0.15, 0.1, 0.1], [0.3, 0.15, 0.1], [0.1, 0.15, 0.3]],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub seed: u64,
    /// Patch/label agreement in every domain except `shift_domain`.
    pub spurious: Option<f64>,
    /// Patch/label agreement in `shift_domain`; defaults to `1 - spurious`.
    pub spurious_shift: Option<f64>,
    /// Domain whose spurious correlation differs (default: the last one).
    pub shift_domain: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            domains: 4,
            per_cell: 25,
            seed: 0,
            spurious: None,
            spurious_shift: None,
            shift_domain: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=ShapeKind::ALL.len()).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                ShapeKind::ALL.len(),
                self.classes
            )));
        }
        if !(3..=Style::ALL.len()).contains(&self.domains) {
            return Err(Error::Config(format!(
                "domains must be in 3..={} (one style per domain), got {}",
                Style::ALL.len(),
                self.domains
            )));
        }
        if self.per_cell < 8 {
            return Err(Error::Config(format!("per-cell count must be ≥ 8, got {}", self.per_cell)));
        }
        for p in [self.spurious, self.spurious_shift].into_iter().flatten() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("spurious correlation {p} outside [0, 1]")));
            }
        }
        if self.spurious_shift.is_some() && self.spurious.is_none() {
            return Err(Error::Config("spurious-shift given without spurious".into()));
        }
        if let Some(d) = self.shift_domain {
            if d >= self.domains {
                return Err(Error::UnknownDomain(d));
            }
        }
        Ok(())
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        let shift = self.shift_domain.unwrap_or(self.domains - 1);
        (0..self.domains)
            .map(|d| DomainSpec {
                domain_id: d,
                style: Style::ALL[d],
                palette: palette_for(Style::ALL[d]),
                spurious_correlation: self.spurious.map(|p| {
                    if d == shift {
                        self.spurious_shift.unwrap_or(1.0 - p)
                    } else {
                        p
                    }
                }),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identity: `(domain · classes + label) · per_cell + index`.
    pub id: u64,
    /// `[3, 32, 32]`, values in `[0, 1]`, exactly representable in `f32`.
    pub image: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<Sample>,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn render(spec: &DomainSpec, shape: ShapeKind, label: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = IMAGE_SIZE as f64;
    let radius = 9.0 * rng.gen_range(0.8..1.2);
    let jitter = 0.2 * radius;
    let cx = n / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = n / 2.0 + rng.gen_range(-jitter..jitter);
    let bg = spec.palette[0];
    let fg = spec.palette[1 + rng.gen_range(0..spec.palette.len() - 1)];
    let fg2 = spec.palette[1 + rng.gen_range(0..spec.palette.len() - 1)];
    let stripe_period = rng.gen_range(3.0..5.0);
    let stripe_phase = rng.gen_range(0.0..stripe_period);

    let mut img = vec![0.0; PIXELS];
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            // 4×4 supersampled coverage
            let mut cover = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = px as f64 + (sx as f64 + 0.5) / 4.0 - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / 4.0 - cy;
                    let d = shape.sdf(x, y, radius);
                    let inside = match spec.style {
                        Style::OutlineOnly => d.abs() <= 0.9,
                        _ => d <= 0.0,
                    };
                    if inside {
                        cover += 1.0 / 16.0;
                    }
                }
            }
            let mut back = bg;
            let mut front = fg;
            match spec.style {
                Style::SolidFill | Style::OutlineOnly => {}
                Style::Stripes => {
                    let t = ((px + py) as f64 + stripe_phase) / stripe_period;
                    if t.floor() as i64 % 2 == 0 {
                        front = fg2;
                    }
                    if ((py as f64 + stripe_phase) / (2.0 * stripe_period)).floor() as i64 % 2 == 0 {
                        back = [bg[0] - 0.08, bg[1] - 0.08, bg[2] - 0.08];
                    }
                }
                Style::SpeckleNoise => {
                    let nb = rng.gen_range(-0.15..0.15);
                    let nf = rng.gen_range(-0.2..0.2);
                    back = [bg[0] + nb, bg[1] + nb, bg[2] + nb];
                    front = [fg[0] + nf, fg[1] + nf, fg[2] + nf];
                }
            }
            for c in 0..CHANNELS {
                let v = cover * front[c] + (1.0 - cover) * back[c];
                img[(c * IMAGE_SIZE + py) * IMAGE_SIZE + px] = v.clamp(0.0, 1.0);
            }
        }
    }

    if let Some(p) = spec.spurious_correlation {
        let color_class = if rng.gen_bool(p) {
            label
        } else {
            let other = rng.gen_range(0..classes - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        };
        let color = CLASS_COLORS[color_class];
        for py in 0..PATCH_SIZE {
            for px in 0..PATCH_SIZE {
                for c in 0..CHANNELS {
                    img[(c * IMAGE_SIZE + py) * IMAGE_SIZE + px] = color[c];
                }
            }
        }
    }

    img.iter().map(|&v| v as f32 as f64).collect()
}

/// Produces `per_cell` samples for every (class, domain) pair.
///
/// Each sample draws from its own random stream, so the output is a pure
/// function of the configuration and cells can be rendered in any order.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let specs = config.domain_specs();
    let (c, n) = (config.classes, config.per_cell);
    let total = config.domains * c * n;
    let samples = crate::kernels::map_indices(crate::Exec::default(), total, |id| {
        let domain = id / (c * n);
        let label = (id / n) % c;
        let mut rng = sample_rng(config.seed, id as u64);
        Sample {
            id: id as u64,
            image: render(&specs[domain], ShapeKind::ALL[label], label, c, &mut rng),
            label,
            domain,
        }
    });
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}

/// Reads the spurious patch color back out of an image, as a class index.
pub fn patch_class(image: &[f64]) -> Option<usize> {
    let px = |c: usize| image[(c * IMAGE_SIZE + 1) * IMAGE_SIZE + 1];
    CLASS_COLORS.iter().position(|col| {
        (0..CHANNELS).all(|c| (px(c) - col[c] as f32 as f64).abs() < 1e-6)
    })
}

/// Mean color per channel, a crude style descriptor.
pub fn mean_color(image: &[f64]) -> [f64; 3] {
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = image[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Leave-one-domain-out partition, by sample id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub unseen_domain: usize,
    pub seed: u64,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Splits every source domain 80/20 (stratified per class) into train and
/// validation and reserves the unseen domain whole for testing.
///
/// Membership depends only on `seed` and sample ids, never on input order.
pub fn make_splits(samples: &[Sample], unseen_domain: usize, seed: u64) -> Result<SplitPlan> {
    if !samples.iter().any(|s| s.domain == unseen_domain) {
        return Err(Error::UnknownDomain(unseen_domain));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    let mut test = Vec::new();
    for s in samples {
        if s.domain == unseen_domain {
            test.push(s.id);
        } else {
            cells.entry((s.domain, s.label)).or_default().push(s.id);
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("no source-domain samples".into()));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for ids in cells.values_mut() {
        ids.sort_by_key(|&id| (splitmix64(seed ^ splitmix64(id)), id));
        let n_train = (ids.len() as f64 * TRAIN_FRACTION).round() as usize;
        train.extend_from_slice(&ids[..n_train]);
        val.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        unseen_domain,
        seed,
        train,
        val,
        test,
    })
}

/// Images, labels and domains for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl LabeledBatch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let (mut data, mut labels, mut domains) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            data.extend_from_slice(&s.image);
            labels.push(s.label);
            domains.push(s.domain);
        }
        if labels.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let images = Tensor::new(&[labels.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?;
        Ok(LabeledBatch {
            images,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch of batches as positions into `samples`.
///
/// Samples are paired within their (class, domain) cell and pairs are
/// interleaved across domains, so every batch of at least four holds two
/// domains and a same-cell pair whenever the split allows. The incomplete
/// tail is dropped.
pub fn batches(samples: &[&Sample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 4 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch size must be even and ≥ 4, got {batch_size}")));
    }
    if batch_size > samples.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds split size {}",
            samples.len()
        )));
    }
    let mut rng = sample_rng(seed, epoch);

    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (pos, s) in samples.iter().enumerate() {
        cells.entry((s.domain, s.label)).or_default().push(pos);
    }
    let mut by_domain: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    let mut singles = Vec::new();
    for ((domain, _), members) in cells.iter_mut() {
        members.shuffle(&mut rng);
        let mut chunks = members.chunks_exact(2);
        for pair in &mut chunks {
            by_domain.entry(*domain).or_default().push(pair.to_vec());
        }
        singles.extend_from_slice(chunks.remainder());
    }
    for pairs in by_domain.values_mut() {
        pairs.shuffle(&mut rng);
    }

    // Always draw from the domain with the most pairs left, never the same
    // domain twice in a row while another one still has pairs.
    let mut queues: Vec<Vec<Vec<usize>>> = by_domain.into_values().collect();
    let mut order = Vec::with_capacity(samples.len());
    let mut last: Option<usize> = None;
    loop {
        let pick = (0..queues.len())
            .filter(|&d| !queues[d].is_empty())
            .max_by_key(|&d| (last != Some(d), queues[d].len(), std::cmp::Reverse(d)));
        let Some(d) = pick else { break };
        order.extend(queues[d].pop().expect("non-empty queue"));
        last = Some(d);
    }
    singles.shuffle(&mut rng);
    order.extend(singles);

    let mut out: Vec<Vec<usize>> = order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect();
    out.shuffle(&mut rng);
    Ok(out)
}

impl Dataset {
    pub fn get(&self, id: u64) -> Option<&Sample> {
        // ids are dense and samples are stored in id order when generated,
        // but imported/filtered datasets may not be.
        match self.samples.get(id as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.samples.iter().find(|s| s.id == id),
        }
    }

    pub fn select(&self, ids: &[u64]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|&id| {
                self.get(id)
                    .ok_or_else(|| Error::Config(format!("sample id {id} not in dataset")))
            })
            .collect()
    }

    pub fn cell_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry((s.domain, s.label)).or_insert(0) += 1;
        }
        counts
    }

    /// Writes `<dir>/dataset.json`, `<dir>/all.bin` and `<dir>/all.txt`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("dataset.json");
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&cfg_path, json + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        let refs: Vec<&Sample> = self.samples.iter().collect();
        export_split(dir, "all", &refs)
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: SynthConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let samples = import_split(dir, "all")?;
        Ok(Dataset { config, samples })
    }
}

/// Writes one split as `<name>.bin` (little-endian `f32`, `3×32×32` per
/// sample, back to back) and `<name>.txt` (one `offset label domain id`
/// record per line, offsets in bytes).
pub fn export_split(dir: &Path, name: &str, samples: &[&Sample]) -> Result<()> {
    let bin_path = dir.join(format!("{name}.bin"));
    let txt_path = dir.join(format!("{name}.txt"));
    let mut bin = BufWriter::new(fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
    let mut txt = BufWriter::new(fs::File::create(&txt_path).map_err(|e| Error::io(&txt_path, e))?);
    let mut offset = 0u64;
    for s in samples {
        for &v in &s.image {
            bin.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        }
        writeln!(txt, "{offset} {} {} {}", s.label, s.domain, s.id).map_err(|e| Error::io(&txt_path, e))?;
        offset += (PIXELS * 4) as u64;
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    txt.flush().map_err(|e| Error::io(&txt_path, e))?;
    Ok(())
}

pub fn import_split(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let bin_path = dir.join(format!("{name}.bin"));
    let txt_path = dir.join(format!("{name}.txt"));
    let mut raw = Vec::new();
    fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&bin_path, e))?;
    let file = fs::File::open(&txt_path).map_err(|e| Error::io(&txt_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&txt_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(&txt_path, format!("line {}: {why}", lineno + 1));
        let fields: Vec<u64> = line
            .split_whitespace()
            .map(|f| f.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("expected unsigned integers"))?;
        let &[offset, label, domain, id] = fields.as_slice() else {
            return Err(bad("expected `offset label domain id`"));
        };
        let start = offset as usize;
        let end = start + PIXELS * 4;
        if end > raw.len() {
            return Err(bad("offset beyond end of tensor file"));
        }
        let image = raw[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        samples.push(Sample {
            id,
            image,
            label: label as usize,
            domain: domain as usize,
        });
    }
    Ok(samples)
}
