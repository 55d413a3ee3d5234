//! Losses, optimization loops and composition metrics.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbirnet::{CbirNet, CbirNetConfig};
use crate::ccnet::{batch_tensor, CcNet, CcNetConfig, Kcm};
use crate::composition_data::{CompositionClass, CompositionLabel, CompositionSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{softmax, Adam, Param, Tensor};
use crate::preprocessing::GrayscaleImage;
use crate::shot_miner::{FrameSource, TripletManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// How composition labels with several classes enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Softmax cross-entropy against the first listed class.
    #[default]
    FirstLabel,
    /// Independent sigmoid cross-entropy per class.
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub margin: f64,
    pub l_kcm: f64,
    pub label_mode: LabelMode,
    /// Start the retrieval backbone from the composition backbone's weights.
    pub import_backbone: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            optimizer: Optimizer::Adam,
            margin: 0.0,
            l_kcm: 0.5,
            label_mode: LabelMode::FirstLabel,
            import_backbone: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must be in [0,1], got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.l_kcm) {
            return Err(Error::Config(format!("l_kcm must be in [0,1], got {}", self.l_kcm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub network: String,
    pub epoch_losses: Vec<f64>,
    pub wall_clock_seconds: f64,
    pub checkpoint: Option<String>,
    pub samples: usize,
    pub config: serde_json::Value,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        self.network == other.network
            && self.epoch_losses == other.epoch_losses
            && self.samples == other.samples
            && self.config == other.config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Similar,
    Dissimilar,
}

impl Target {
    pub fn from_sign(t: i32) -> Result<Self> {
        match t {
            1 => Ok(Target::Similar),
            -1 => Ok(Target::Dissimilar),
            _ => Err(Error::RejectedInput(format!("target must be +1 or -1, got {t}"))),
        }
    }
}

fn norms_and_cos(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine embedding loss of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((na, nb, dot / (na * nb)))
}

/// `1 - cos(a, b)` for similar pairs, `max(0, cos(a, b) - margin)` otherwise.
pub fn cosine_embedding_loss(a: &[f64], b: &[f64], target: Target, margin: f64) -> Result<f64> {
    let (_, _, cos) = norms_and_cos(a, b)?;
    Ok(match target {
        Target::Similar => 1.0 - cos,
        Target::Dissimilar => (cos - margin).max(0.0),
    })
}

/// Loss with its gradients with respect to `a` and `b`.
pub fn cosine_embedding_loss_grad(a: &[f64], b: &[f64], target: Target, margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb, cos) = norms_and_cos(a, b)?;
    let (loss, scale) = match target {
        Target::Similar => (1.0 - cos, -1.0),
        Target::Dissimilar if cos > margin => (cos - margin, 1.0),
        Target::Dissimilar => (0.0, 0.0),
    };
    let dcos = |u: &[f64], v: &[f64], nu: f64, nv: f64| -> Vec<f64> {
        u.iter().zip(v).map(|(&ui, &vi)| scale * (vi / (nu * nv) - cos * ui / (nu * nu))).collect()
    };
    Ok((loss, dcos(a, b, na, nb), dcos(b, a, nb, na)))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[class].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[class] -= 1.0;
    (loss, grad)
}

/// Sigmoid cross-entropy summed over classes, with its logit gradient.
pub fn sigmoid_cross_entropy(logits: &[f64], targets: &[bool]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let y = if t { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            1.0 / (1.0 + (-z).exp()) - y
        })
        .collect();
    (loss, grad)
}

fn mix(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order of one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    idx
}

fn adam_step(adam: &mut Adam, params: Vec<&mut Param>) {
    let mut params = params;
    adam.step(&mut params);
}

/// Loss and logit gradient for one sample under `mode`.
pub fn composition_loss(logits: &[f64], label: &CompositionLabel, mode: LabelMode) -> (f64, Vec<f64>) {
    match mode {
        LabelMode::FirstLabel => softmax_cross_entropy(logits, label.primary().index()),
        LabelMode::MultiLabel => sigmoid_cross_entropy(logits, &label.multi_hot()),
    }
}

/// Mean batch loss; accumulates parameter gradients into `net`.
pub fn ccnet_batch_step(net: &mut CcNet, batch: &[&CompositionSample], mode: LabelMode) -> Result<f64> {
    let images: Vec<&GrayscaleImage> = batch.iter().map(|s| &s.image).collect();
    let (logits, trace) = net.forward_trace(&batch_tensor(&images)?)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let n = batch.len() as f64;
    for (i, s) in batch.iter().enumerate() {
        let (loss, g) = composition_loss(logits.item(i), &s.label, mode);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on sample {}", s.image.source_id())));
        }
        total += loss;
        for (d, v) in grad.item_mut(i).iter_mut().zip(g) {
            *d = v / n;
        }
    }
    net.backward(&trace, &grad);
    Ok(total / n)
}

/// Trains a freshly Xavier-initialized CCNet on `samples`.
pub fn train_ccnet(config: CcNetConfig, samples: &[CompositionSample], hp: &Hyperparams) -> Result<(CcNet, TrainReport)> {
    hp.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let start = Instant::now();
    let mut net = CcNet::new(config)?;
    net.init_xavier(hp.seed);
    let mut adam = Adam::new(hp.learning_rate);
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let order = epoch_order(samples.len(), hp.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<&CompositionSample> = chunk.iter().map(|&i| &samples[i]).collect();
            net.zero_grad();
            sum += ccnet_batch_step(&mut net, &batch, hp.label_mode)? * batch.len() as f64;
            adam_step(&mut adam, net.params_mut());
            if net.params().iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
            }
        }
        let mean = sum / samples.len() as f64;
        log::info!("ccnet epoch {}/{}: loss {mean:.5}", epoch + 1, hp.epochs);
        epoch_losses.push(mean);
    }
    let report = TrainReport {
        network: "ccnet".into(),
        epoch_losses,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        checkpoint: None,
        samples: samples.len(),
        config: serde_json::json!({ "hyperparams": hp, "ccnet": net.config }),
    };
    Ok((net, report))
}

/// Loads every frame a manifest references and computes its KCM once.
pub struct FrameCache {
    images: Vec<GrayscaleImage>,
    kcms: Vec<Kcm>,
    index: HashMap<String, usize>,
}

impl FrameCache {
    pub fn build(manifest: &TripletManifest, source: &dyn FrameSource, ccnet: &CcNet) -> Result<Self> {
        let mut index = HashMap::new();
        let mut refs = Vec::new();
        for t in &manifest.triplets {
            for f in [&t.anchor, &t.positive, &t.negative] {
                if let std::collections::hash_map::Entry::Vacant(e) = index.entry(f.source_id()) {
                    e.insert(refs.len());
                    refs.push(f);
                }
            }
        }
        let images = refs.iter().map(|f| source.load(f)).collect::<Result<Vec<_>>>()?;
        let mut kcms = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            kcms.extend(ccnet.kcm_batch(&batch_tensor(&chunk.iter().collect::<Vec<_>>())?)?);
        }
        Ok(Self { images, kcms, index })
    }

    fn get(&self, source_id: &str) -> usize {
        self.index[source_id]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Trains a CBIRNet against a frozen CCNet. Only CBIRNet parameters are
/// updated; `ccnet` is borrowed immutably throughout.
pub fn train_cbirnet(
    manifest: &TripletManifest,
    source: &dyn FrameSource,
    ccnet: &CcNet,
    config: CbirNetConfig,
    hp: &Hyperparams,
) -> Result<(CbirNet, TrainReport)> {
    hp.validate()?;
    if config.fusion.l_kcm != hp.l_kcm {
        return Err(Error::Config(format!(
            "l_kcm differs between network config ({}) and hyperparameters ({})",
            config.fusion.l_kcm, hp.l_kcm
        )));
    }
    if manifest.triplets.is_empty() {
        return Err(Error::Data("triplet manifest is empty".into()));
    }
    if !ccnet.is_ready() {
        return Err(Error::NotReady("frozen CCNet is not loaded".into()));
    }
    let mut net = CbirNet::new(config)?;
    net.init_xavier(hp.seed);
    if hp.import_backbone {
        if net.backbone.config != ccnet.backbone.config {
            return Err(Error::Config("cannot import backbone: CCNet and CBIRNet backbones differ".into()));
        }
        for (dst, src) in net.backbone.params_mut().into_iter().zip(ccnet.backbone.params()) {
            dst.value.copy_from_slice(&src.value);
        }
    }
    train_cbirnet_from(net, manifest, source, ccnet, hp)
}

/// Trains an already initialized CBIRNet; see [`train_cbirnet`].
pub fn train_cbirnet_from(
    mut net: CbirNet,
    manifest: &TripletManifest,
    source: &dyn FrameSource,
    ccnet: &CcNet,
    hp: &Hyperparams,
) -> Result<(CbirNet, TrainReport)> {
    hp.validate()?;
    if !net.is_ready() {
        return Err(Error::NotReady("CBIRNet must be initialized before training".into()));
    }
    if net.l_kcm() != hp.l_kcm {
        return Err(Error::Config(format!(
            "l_kcm differs between network config ({}) and hyperparameters ({})",
            net.l_kcm(),
            hp.l_kcm
        )));
    }
    if manifest.triplets.is_empty() {
        return Err(Error::Data("triplet manifest is empty".into()));
    }
    if !ccnet.is_ready() {
        return Err(Error::NotReady("frozen CCNet is not loaded".into()));
    }
    let start = Instant::now();
    let cache = FrameCache::build(manifest, source, ccnet)?;
    let mut adam = Adam::new(hp.learning_rate);
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let n = manifest.triplets.len();
    for epoch in 0..hp.epochs {
        let order = epoch_order(n, hp.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            net.zero_grad();
            sum += cbir_batch_step(&mut net, manifest, &cache, chunk, hp.margin)? * chunk.len() as f64;
            adam_step(&mut adam, net.params_mut());
        }
        let mean = sum / n as f64;
        log::info!("cbirnet epoch {}/{}: loss {mean:.5}", epoch + 1, hp.epochs);
        epoch_losses.push(mean);
    }
    let report = TrainReport {
        network: "cbirnet".into(),
        epoch_losses,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        checkpoint: None,
        samples: n,
        config: serde_json::json!({ "hyperparams": hp, "cbirnet": net.config, "manifest_seed": manifest.rng_seed }),
    };
    Ok((net, report))
}

/// Mean per-triplet loss `loss(a,p,+1) + loss(a,n,-1)` over the batch.
fn cbir_batch_step(net: &mut CbirNet, manifest: &TripletManifest, cache: &FrameCache, chunk: &[usize], margin: f64) -> Result<f64> {
    let b = chunk.len();
    let mut slots = Vec::with_capacity(3 * b);
    for &ti in chunk {
        let t = &manifest.triplets[ti];
        slots.push(cache.get(&t.anchor.source_id()));
        slots.push(cache.get(&t.positive.source_id()));
        slots.push(cache.get(&t.negative.source_id()));
    }
    let images: Vec<&GrayscaleImage> = slots.iter().map(|&i| &cache.images[i]).collect();
    let kcms: Vec<&Kcm> = slots.iter().map(|&i| &cache.kcms[i]).collect();
    let (emb, trace) = net.forward_trace(&batch_tensor(&images)?, &kcms)?;
    let mut grad = Tensor::zeros(emb.shape());
    let mut total = 0.0;
    for (j, &ti) in chunk.iter().enumerate() {
        let (a, p, ng) = (emb.item(3 * j), emb.item(3 * j + 1), emb.item(3 * j + 2));
        let terms = cosine_embedding_loss_grad(a, p, Target::Similar, margin)
            .and_then(|pos| Ok((pos, cosine_embedding_loss_grad(a, ng, Target::Dissimilar, margin)?)));
        let t = &manifest.triplets[ti];
        let describe = || format!("{} / {} / {}", t.anchor.source_id(), t.positive.source_id(), t.negative.source_id());
        let ((lp, ga_p, gp), (ln, ga_n, gn)) =
            terms.map_err(|e| Error::Numeric(format!("triplet {ti} ({}): {e}", describe())))?;
        let loss = lp + ln;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on triplet {ti} ({})", describe())));
        }
        total += loss;
        let s = 1.0 / b as f64;
        for (k, (x, y)) in ga_p.iter().zip(&ga_n).enumerate() {
            grad.item_mut(3 * j)[k] = s * (x + y);
        }
        for (k, v) in gp.iter().enumerate() {
            grad.item_mut(3 * j + 1)[k] = s * v;
        }
        for (k, v) in gn.iter().enumerate() {
            grad.item_mut(3 * j + 2)[k] = s * v;
        }
    }
    net.backward(&trace, &grad);
    Ok(total / b as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

/// Metrics from argmax predictions. A prediction is correct when it is one
/// of the sample's labels; otherwise the sample's first label is its truth.
/// Macro averages run over classes occurring in truths or predictions, with
/// undefined ratios counted as zero.
pub fn evaluate_predictions(predictions: &[CompositionClass], truths: &[CompositionLabel]) -> Result<CompositionMetrics> {
    if predictions.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), truths.len())));
    }
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut correct = 0;
    for (&p, t) in predictions.iter().zip(truths) {
        let truth = if t.contains(p) {
            correct += 1;
            p
        } else {
            t.primary()
        };
        confusion[truth.index()][p.index()] += 1;
    }
    let present: BTreeSet<usize> = (0..NUM_CLASSES)
        .filter(|&k| (0..NUM_CLASSES).any(|j| confusion[k][j] > 0 || confusion[j][k] > 0))
        .collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = present
        .iter()
        .map(|&k| {
            let tp = confusion[k][k];
            let predicted: usize = (0..NUM_CLASSES).map(|j| confusion[j][k]).sum();
            let support: usize = confusion[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics {
                class: CompositionClass::ALL[k].name().to_string(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(CompositionMetrics {
        samples: predictions.len(),
        accuracy: correct as f64 / predictions.len() as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        confusion,
        per_class,
    })
}

pub fn predict_classes(net: &CcNet, images: &[&GrayscaleImage]) -> Result<Vec<CompositionClass>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let (logits, _) = net.forward_batch(&batch_tensor(chunk)?)?;
        for i in 0..chunk.len() {
            let k = crate::ccnet::ClassScores::from_logits(logits.item(i).to_vec()).argmax();
            out.push(CompositionClass::ALL[k]);
        }
    }
    Ok(out)
}

pub fn evaluate_composition(net: &CcNet, samples: &[CompositionSample]) -> Result<CompositionMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let images: Vec<&GrayscaleImage> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_classes(net, &images)?;
    let truths: Vec<CompositionLabel> = samples.iter().map(|s| s.label.clone()).collect();
    evaluate_predictions(&preds, &truths)
}
