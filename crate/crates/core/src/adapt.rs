//! Source training and prototype-based adaptation (MPA).
//!
//! The adaptation objective is
//! `L_seg(source) + L_ssl(target) + alpha * (L_mpa(source) + L_mpa(target))`,
//! where the MPA terms pull the fused decoder features toward a map built
//! from running class prototypes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, Tensor, Var, IGNORE_LABEL};
use crate::data::{images_to_tensor, Image, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ConfusionMatrix};
use crate::model::{argmax_rows, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub temperature: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temperature: 20.0,
            lambda: 0.9,
            alpha: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("loss_weights", format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("loss_weights", format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("loss_weights", format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `-sum y log p` averaged over non-ignored pixels, for probabilities `p`
/// with classes on the last axis. An all-ignored batch gives 0.
pub fn seg_loss(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    let lp = g.log(probs);
    g.nll(lp, labels)
}

/// [`seg_loss`] of `softmax(logits)`, computed stably in log space.
pub fn seg_loss_logits(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Self-training loss: the segmentation loss against pseudo-labels.
pub fn ssl_loss(g: &mut Graph, target_logits: Var, pseudo: &[u8]) -> Result<Var> {
    seg_loss_logits(g, target_logits, pseudo)
}

/// Argmax class per row of a `[.., k]` distribution; ties go to the lowest
/// index. With a threshold, rows whose top probability falls below it are
/// marked [`IGNORE_LABEL`].
pub fn pseudo_labels(probs: &Tensor, threshold: Option<f64>) -> Vec<u8> {
    let k = *probs.shape().last().expect("non-empty shape");
    let mut labels = argmax_rows(probs.data(), k);
    if let Some(tau) = threshold {
        for (l, row) in labels.iter_mut().zip(probs.data().chunks_exact(k)) {
            if row[*l as usize] < tau {
                *l = IGNORE_LABEL;
            }
        }
    }
    labels
}

/// Nearest-neighbour downsampling of `n` stacked `h x w` label maps by an
/// integer factor, sampling each cell at its center pixel.
pub fn downsample_labels(labels: &[u8], n: usize, h: usize, w: usize, factor: usize) -> Result<Vec<u8>> {
    if labels.len() != n * h * w || factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "downsample_labels",
            format!("{} labels do not tile {n}x{h}x{w} by {factor}", labels.len()),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * ho * wo);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let (sy, sx) = (y * factor + factor / 2, x * factor + factor / 2);
                out.push(labels[(b * h + sy) * w + sx]);
            }
        }
    }
    Ok(out)
}

/// Running per-class mean embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMemory {
    pub dim: usize,
    pub momentum: f64,
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub initialized: Vec<bool>,
}

/// Per-class feature sums and pixel counts over `[rows, dim]` features.
fn class_sums(features: &[f64], labels: &[u8], k: usize, dim: usize) -> Result<(Vec<Vec<f64>>, Vec<u64>)> {
    if features.len() != labels.len() * dim {
        return Err(Error::shape("prototypes", &[features.len() / dim.max(1), dim], &[labels.len()]));
    }
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0u64; k];
    for (row, &l) in features.chunks_exact(dim).zip(labels) {
        if l == IGNORE_LABEL {
            continue;
        }
        let c = l as usize;
        if c >= k {
            return Err(Error::invalid("prototypes", format!("label {l} out of range for {k} classes")));
        }
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
        counts[c] += 1;
    }
    Ok((sums, counts))
}

impl PrototypeMemory {
    pub fn new(num_classes: usize, dim: usize, momentum: f64) -> Self {
        Self {
            dim,
            momentum,
            prototypes: vec![vec![0.0; dim]; num_classes],
            counts: vec![0; num_classes],
            initialized: vec![false; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Full-pass class means over every `(features, labels)` pair; classes
    /// absent everywhere stay uninitialized.
    pub fn from_dataset<'a>(
        num_classes: usize,
        dim: usize,
        momentum: f64,
        items: impl IntoIterator<Item = (&'a [f64], &'a [u8])>,
    ) -> Result<Self> {
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0u64; num_classes];
        for (f, l) in items {
            let (s, c) = class_sums(f, l, num_classes, dim)?;
            for k in 0..num_classes {
                for (a, b) in sums[k].iter_mut().zip(&s[k]) {
                    *a += b;
                }
                counts[k] += c[k];
            }
        }
        let mut mem = Self::new(num_classes, dim, momentum);
        for k in 0..num_classes {
            if counts[k] > 0 {
                mem.prototypes[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
                mem.initialized[k] = true;
            }
            mem.counts[k] = counts[k];
        }
        Ok(mem)
    }

    /// One EMA step toward each present class's batch mean. A class seen for
    /// the first time takes the batch mean directly.
    pub fn update(&mut self, features: &[f64], labels: &[u8]) -> Result<()> {
        let (sums, counts) = class_sums(features, labels, self.num_classes(), self.dim)?;
        let m = self.momentum;
        for k in 0..self.num_classes() {
            if counts[k] == 0 {
                continue;
            }
            let n = counts[k] as f64;
            let p = &mut self.prototypes[k];
            if self.initialized[k] {
                for (pv, s) in p.iter_mut().zip(&sums[k]) {
                    *pv = m * *pv + (1.0 - m) * (s / n);
                }
            } else {
                for (pv, s) in p.iter_mut().zip(&sums[k]) {
                    *pv = s / n;
                }
                self.initialized[k] = true;
            }
            self.counts[k] += counts[k];
        }
        Ok(())
    }

    /// Prototype map `[rows, dim]` for a label map plus the mask of
    /// non-ignored rows. Ignored rows hold zeros.
    pub fn reconstruct(&self, labels: &[u8]) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut out = vec![0.0; labels.len() * self.dim];
        let mut mask = vec![false; labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let c = l as usize;
            if c >= self.num_classes() || !self.initialized[c] {
                return Err(Error::UninitializedClass(c));
            }
            out[i * self.dim..(i + 1) * self.dim].copy_from_slice(&self.prototypes[c]);
            mask[i] = true;
        }
        Ok((out, mask))
    }
}

/// The two MPA terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct MpaLoss {
    pub total: Var,
    pub kl: Var,
    pub ce: Var,
}

/// `lambda * T^2 * KL(softmax(f_hat / T) || softmax(f / T)) + (1 - lambda) * CE(labels, softmax(f))`
/// with softmax over the channel axis, each averaged over non-ignored pixels.
/// `f_hat` is a constant target of the same shape as `f`.
pub fn mpa_loss(g: &mut Graph, f: Var, f_hat: &Tensor, labels: &[u8], w: &LossWeights) -> Result<MpaLoss> {
    w.validate()?;
    let s = g.shape(f).to_vec();
    if f_hat.shape() != s.as_slice() {
        return Err(Error::shape("mpa_loss", &s, f_hat.shape()));
    }
    let axis = s.len() - 1;
    let mask: Vec<bool> = labels.iter().map(|&l| l != IGNORE_LABEL).collect();
    let inv_t = 1.0 / w.temperature;
    let scaled = g.scale(f, inv_t);
    let log_q = g.log_softmax(scaled, axis)?;
    let target = g.constant(f_hat.map(|v| v * inv_t));
    let log_p = g.log_softmax(target, axis)?;
    let kl = g.kl_div(log_q, log_p, &mask)?;
    let ce = g.cross_entropy(f, labels)?;
    let a = g.scale(kl, w.lambda * w.temperature * w.temperature);
    let b = g.scale(ce, 1.0 - w.lambda);
    let total = g.add(a, b)?;
    Ok(MpaLoss { total, kl, ce })
}

/// Loss components of one adaptation step; absent target terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub seg: Var,
    pub ssl: Option<Var>,
    pub mpa_source: Option<Var>,
    pub mpa_target: Option<Var>,
}

/// `seg + ssl + alpha * (mpa_source + mpa_target)`.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, alpha: f64) -> Result<Var> {
    let mut total = terms.seg;
    if let Some(ssl) = terms.ssl {
        total = g.add(total, ssl)?;
    }
    for mpa in [terms.mpa_source, terms.mpa_target].into_iter().flatten() {
        let weighted = g.scale(mpa, alpha);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

/// Epoch-wise shuffled minibatches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            order: (0..len).collect(),
            pos: len,
            batch: batch.clamp(1, len.max(1)),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Validation period in iterations, 0 to disable.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            log_every: 10,
            eval_every: 0,
        }
    }
}

fn adamw(lr: f64, weight_decay: f64, iters: usize) -> AdamWConfig {
    AdamWConfig {
        base_lr: lr,
        weight_decay,
        max_iter: iters,
        ..AdamWConfig::default()
    }
}

/// One line of the training or adaptation log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub seg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpa_source: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpa_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

pub type Labeled = (Image, LabelMap);

fn stack(set: &[Labeled], idx: &[usize]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<&Image> = idx.iter().map(|&i| &set[i].0).collect();
    let x = images_to_tensor(&images)?;
    let labels = idx.iter().flat_map(|&i| set[i].1.data.iter().copied()).collect();
    Ok((x, labels))
}

fn check_finite(v: f64, phase: &str, iter: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{phase}: loss became non-finite at iteration {iter}")))
    }
}

fn val_miou(model: &Model, val: Option<&[Labeled]>) -> Result<Option<f64>> {
    let Some(val) = val else { return Ok(None) };
    let refs: Vec<(&Image, &LabelMap)> = val.iter().map(|(i, l)| (i, l)).collect();
    Ok(evaluate(model, &refs)?.miou())
}

fn pixel_acc(g: &Graph, logits: Var, labels: &[u8], k: usize) -> Result<Option<f64>> {
    let pred = argmax_rows(g.value(logits).data(), k);
    Ok(ConfusionMatrix::from_labels(&pred, labels, labels.len(), k)?.pixel_accuracy())
}

/// Supervised source-only training. `log` receives a record every
/// `log_every` iterations and after the last one.
pub fn train_source(
    model: &mut Model,
    source: &[Labeled],
    val: Option<&[Labeled]>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<()> {
    if source.is_empty() && cfg.iters > 0 {
        return Err(Error::invalid("train", "empty source set"));
    }
    let mut opt = AdamW::new(adamw(cfg.lr, cfg.weight_decay, cfg.iters), &model.store);
    let mut sampler = BatchSampler::new(source.len(), cfg.batch_size, cfg.seed, SOURCE_STREAM);
    let k = model.cfg.num_classes;
    for it in 0..cfg.iters {
        let (x, y) = stack(source, &sampler.next_batch())?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = model.forward(&mut g, xv)?;
        let loss = seg_loss_logits(&mut g, out.logits, &y)?;
        let value = g.value(loss).item();
        check_finite(value, "train", it)?;
        let grads = g.backward(loss)?;
        let lr = opt.current_lr();
        opt.step(&mut model.store, &grads)?;
        let last = it + 1 == cfg.iters;
        let eval_now = cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || last);
        if eval_now || (cfg.log_every > 0 && (it % cfg.log_every == 0 || last)) {
            log(&LogRecord {
                phase: "train".into(),
                iter: it,
                lr,
                loss: value,
                seg: value,
                pixel_acc: pixel_acc(&g, out.logits, &y, k)?,
                val_miou: if eval_now { val_miou(model, val)? } else { None },
                ..Default::default()
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub momentum: f64,
    pub warmup_iters: usize,
    pub refresh_period: usize,
    pub max_iters: usize,
    pub seed: u64,
    #[serde(default)]
    pub pseudo_threshold: Option<f64>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub ssl: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Target validation period in iterations, 0 to disable.
    #[serde(default)]
    pub eval_every: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_log_every() -> usize {
    10
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            lambda: w.lambda,
            temperature: w.temperature,
            momentum: 0.999,
            warmup_iters: 0,
            refresh_period: 100,
            max_iters: 500,
            seed: 0,
            pseudo_threshold: None,
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            ssl: true,
            log_every: default_log_every(),
            eval_every: 0,
        }
    }
}

impl AdaptConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            temperature: self.temperature,
            lambda: self.lambda,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid("adapt_config", format!("momentum must lie in (0, 1), got {}", self.momentum)));
        }
        if self.refresh_period == 0 {
            return Err(Error::invalid("adapt_config", "refresh_period must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fused features `[rows, C_emb]` and the stride-4 labels for a labeled set.
fn fused_features(model: &Model, set: &[Labeled]) -> Result<Vec<(Vec<f64>, Vec<u8>)>> {
    let mut out = Vec::new();
    for chunk in set.chunks(4) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.0).collect();
        let (h, w) = (images[0].height, images[0].width);
        let mut g = Graph::inference();
        let x = g.constant(images_to_tensor(&images)?);
        let d = model.forward(&mut g, x)?;
        let labels: Vec<u8> = chunk.iter().flat_map(|s| s.1.data.iter().copied()).collect();
        let q = downsample_labels(&labels, chunk.len(), h, w, 4)?;
        out.push((g.value(d.fused).data().to_vec(), q));
    }
    Ok(out)
}

/// Prototypes from source ground truth over the whole set.
pub fn prototype_init(model: &Model, source: &[Labeled], momentum: f64) -> Result<PrototypeMemory> {
    if source.is_empty() {
        return Err(Error::invalid("prototype_init", "empty dataset"));
    }
    let feats = fused_features(model, source)?;
    PrototypeMemory::from_dataset(
        model.cfg.num_classes,
        model.cfg.embed_dim,
        momentum,
        feats.iter().map(|(f, l)| (f.as_slice(), l.as_slice())),
    )
}

/// Full-resolution pseudo-labels for every target image.
pub fn refresh_pseudo_labels(model: &Model, target: &[Image], threshold: Option<f64>) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(target.len());
    for chunk in target.chunks(4) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let (probs, _) = model.segment(&images_to_tensor(&refs)?)?;
        let labels = pseudo_labels(&probs, threshold);
        let per = labels.len() / chunk.len();
        out.extend(labels.chunks_exact(per).map(<[u8]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub log: Vec<LogRecord>,
    pub prototypes: Option<PrototypeMemory>,
}

/// Warm-up on source, then joint source/target optimization with
/// pseudo-label refresh every `refresh_period` iterations.
pub fn adapt_loop(
    model: &mut Model,
    source: &[Labeled],
    target: &[Image],
    target_val: Option<&[Labeled]>,
    cfg: &AdaptConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<AdaptReport> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::invalid("adapt", "empty source set"));
    }
    let mut report = AdaptReport::default();
    let mut record = |r: LogRecord, report: &mut AdaptReport| {
        log(&r);
        report.log.push(r);
    };
    if cfg.warmup_iters > 0 {
        let warm = TrainConfig {
            iters: cfg.warmup_iters,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            log_every: cfg.log_every,
            eval_every: 0,
        };
        let mut sink = Vec::new();
        train_source(model, source, None, &warm, &mut |r| sink.push(r.clone()))?;
        for mut r in sink {
            r.phase = "warmup".into();
            record(r, &mut report);
        }
    }

    let w = cfg.weights();
    let use_target = !target.is_empty() && (cfg.ssl || cfg.alpha > 0.0);
    let use_mpa = cfg.alpha > 0.0;
    let mut memory = if use_mpa { Some(prototype_init(model, source, cfg.momentum)?) } else { None };
    let mut opt = AdamW::new(adamw(cfg.lr, cfg.weight_decay, cfg.max_iters), &model.store);
    let mut src = BatchSampler::new(source.len(), cfg.batch_size, cfg.seed, SOURCE_STREAM);
    let mut tgt = BatchSampler::new(target.len().max(1), cfg.batch_size, cfg.seed, TARGET_STREAM);
    let mut pseudo: Vec<Vec<u8>> = Vec::new();

    for it in 0..cfg.max_iters {
        if use_target && it % cfg.refresh_period == 0 {
            pseudo = refresh_pseudo_labels(model, target, cfg.pseudo_threshold)?;
        }
        let (xs, ys) = stack(source, &src.next_batch())?;
        let ns = xs.shape()[0];
        let (h, wd) = (xs.shape()[1], xs.shape()[2]);
        let ys_q = downsample_labels(&ys, ns, h, wd, 4)?;
        let mut g = Graph::new();
        let xsv = g.constant(xs);
        let out_s = model.forward(&mut g, xsv)?;
        let seg = seg_loss_logits(&mut g, out_s.logits, &ys)?;
        let mut terms = LossTerms {
            seg,
            ssl: None,
            mpa_source: None,
            mpa_target: None,
        };

        let mut target_batch = None;
        if use_target {
            let idx = tgt.next_batch();
            let refs: Vec<&Image> = idx.iter().map(|&i| &target[i]).collect();
            let xt = images_to_tensor(&refs)?;
            let (ht, wt) = (xt.shape()[1], xt.shape()[2]);
            let yt: Vec<u8> = idx.iter().flat_map(|&i| pseudo[i].iter().copied()).collect();
            let yt_q = downsample_labels(&yt, idx.len(), ht, wt, 4)?;
            let xtv = g.constant(xt);
            let out_t = model.forward(&mut g, xtv)?;
            if cfg.ssl {
                terms.ssl = Some(ssl_loss(&mut g, out_t.logits, &yt)?);
            }
            target_batch = Some((out_t, yt_q));
        }

        if let Some(mem) = memory.as_mut() {
            let mut feats = g.value(out_s.fused).data().to_vec();
            let mut labels = ys_q.clone();
            if let Some((out_t, yt_q)) = &target_batch {
                feats.extend_from_slice(g.value(out_t.fused).data());
                labels.extend_from_slice(yt_q);
            }
            mem.update(&feats, &labels)?;
            let (fh, _) = mem.reconstruct(&ys_q)?;
            let fh = Tensor::new(g.shape(out_s.fused).to_vec(), fh)?;
            terms.mpa_source = Some(mpa_loss(&mut g, out_s.fused, &fh, &ys_q, &w)?.total);
            if let Some((out_t, yt_q)) = &target_batch {
                let (fh, _) = mem.reconstruct(yt_q)?;
                let fh = Tensor::new(g.shape(out_t.fused).to_vec(), fh)?;
                terms.mpa_target = Some(mpa_loss(&mut g, out_t.fused, &fh, yt_q, &w)?.total);
            }
        }

        let total = total_loss(&mut g, &terms, cfg.alpha)?;
        let value = g.value(total).item();
        check_finite(value, "adapt", it)?;
        let grads = g.backward(total)?;
        let lr = opt.current_lr();
        opt.step(&mut model.store, &grads)?;

        let last = it + 1 == cfg.max_iters;
        let eval_now = cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || last);
        if eval_now || (cfg.log_every > 0 && (it % cfg.log_every == 0 || last)) {
            let get = |v: Option<Var>| v.map(|v| g.value(v).item());
            record(
                LogRecord {
                    phase: "adapt".into(),
                    iter: it,
                    lr,
                    loss: value,
                    seg: g.value(terms.seg).item(),
                    ssl: get(terms.ssl),
                    mpa_source: get(terms.mpa_source),
                    mpa_target: get(terms.mpa_target),
                    pixel_acc: pixel_acc(&g, out_s.logits, &ys, model.cfg.num_classes)?,
                    val_miou: if eval_now { val_miou(model, target_val)? } else { None },
                },
                &mut report,
            );
        }
    }
    report.prototypes = memory;
    Ok(report)
}
