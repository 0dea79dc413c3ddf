//! Instruction tuning: which parameters move, how fast, and the loop that
//! moves them.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::docformer::DocFormer;
use crate::encoder::{EncoderTables, VisionEncoder};
use crate::error::{Error, Result};
use crate::lm::Seq2SeqLm;
use crate::model::{instruction_text, Example, Model, PageCache};
use crate::schema::InstructionTemplate;
use crate::tensor::{Graph, ParamStore, Scalar, SeededRng, Tensor};

const TRAINABLE_PREFIXES: [&str; 2] = [DocFormer::PREFIX, EncoderTables::PREFIX];
const FROZEN_PREFIXES: [&str; 2] = [VisionEncoder::PREFIX, Seq2SeqLm::PREFIX];

fn has_prefix(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.'))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Marks the Document-former and the OCR/instruction tables trainable and
/// everything else frozen, or everything trainable with `unfreeze_all`.
pub fn freeze_partition<T: Scalar>(store: &mut ParamStore<T>, unfreeze_all: bool) -> Result<Partition> {
    let mut part = Partition::default();
    for p in store.iter_mut() {
        let train = if TRAINABLE_PREFIXES.iter().any(|pre| has_prefix(&p.name, pre)) {
            true
        } else if FROZEN_PREFIXES.iter().any(|pre| has_prefix(&p.name, pre)) {
            unfreeze_all
        } else {
            return Err(Error::Partition(p.name.clone()));
        };
        p.trainable = train;
        if train {
            part.trainable.push(p.name.clone());
        } else {
            part.frozen.push(p.name.clone());
        }
    }
    Ok(part)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub unfreeze_all: bool,
    pub cap: usize,
    /// Overrides `epochs`: run exactly this many optimizer steps, cycling
    /// through reshuffled passes of the pool as needed.
    pub max_steps: Option<usize>,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            weight_decay: 0.05,
            warmup_steps: 1000,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            unfreeze_all: false,
            cap: 5000,
            max_steps: None,
            log_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, pool: usize) -> usize {
        match self.max_steps {
            Some(n) => n,
            None => self.epochs * pool.div_ceil(self.batch_size.max(1)),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.peak_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("batch_size and peak_lr must be positive, weight_decay non-negative".into()));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> Result<f64> {
    let warmup = cfg.warmup_steps;
    if total_steps <= warmup {
        return Err(Error::Config(format!(
            "total steps {total_steps} must exceed warmup steps {warmup}"
        )));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} is past the final step {total_steps}")));
    }
    if step <= warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    // 0.5 * (1 + cos(pi * progress)) as sin^2 of the remaining angle, which
    // keeps full relative precision as the rate approaches zero
    let remaining = (total_steps - step) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.peak_lr * (std::f64::consts::FRAC_PI_2 * remaining).sin().powi(2))
}

/// AdamW with decoupled weight decay, applied only to matrices.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<usize, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    fn decays(t: &Tensor<T>) -> bool {
        t.rank() == 2 && t.rows() > 1 && t.cols() > 1
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient. Nothing changes if any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            let p = store.get(id);
            if !p.grad.is_finite() {
                return Err(Error::NanGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape())));
            let decay = if Self::decays(&p.tensor) { self.weight_decay } else { 0.0 };
            let w = p.tensor.data_mut();
            let g = p.grad.data();
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                let gf = g.as_f64();
                let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                let wf = w.as_f64();
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *w = T::of(wf - lr * update - lr * decay * wf);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub total_steps: usize,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    /// Entries written to the log: the first step, every `log_every`-th
    /// step and the last step.
    pub log: Vec<LogEntry>,
}

impl TrainReport {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.log {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// A batch-level source of training loss. Implementations put gradients
/// into the store and return the token-mean loss of the batch.
trait BatchLoss<T> {
    fn batch(&mut self, model: &mut Model<T>, items: &[usize], rng: &mut SeededRng) -> Result<f64>;
}

struct InstructionBatches<'a, T> {
    pool: &'a [Example],
    templates: &'a BTreeMap<String, Vec<InstructionTemplate>>,
    pages: PageCache<T>,
    vision_in_graph: bool,
}

impl<T: Scalar> BatchLoss<T> for InstructionBatches<'_, T> {
    fn batch(&mut self, model: &mut Model<T>, items: &[usize], rng: &mut SeededRng) -> Result<f64> {
        let mut prepared = Vec::with_capacity(items.len());
        let mut tokens = 0usize;
        for &i in items {
            let ex = &self.pool[i];
            let text = instruction_text(&ex.record, self.templates, rng).map_err(|e| wrap(&ex.id, e))?;
            let ids = model.instruction_ids(&text).map_err(|e| wrap(&ex.id, e))?;
            tokens += ex.targets.len();
            prepared.push((ex, ids));
        }
        if tokens == 0 {
            return Err(Error::NoTargets);
        }
        let scale = 1.0 / tokens as f64;
        let mut total = 0.0;
        for (ex, ids) in prepared {
            let mut g = Graph::new();
            let (sum, _) = model
                .loss_sum(&mut g, ex, &ids, &mut self.pages, self.vision_in_graph)
                .map_err(|e| wrap(&ex.id, e))?;
            let loss = g.scale(sum, scale);
            total += g.value(loss).item().as_f64();
            g.backward_into(loss, &mut model.store).map_err(|e| wrap(&ex.id, e))?;
        }
        Ok(total)
    }
}

fn wrap(id: &str, e: Error) -> Error {
    match e {
        Error::Instance { .. } => e,
        other => Error::Instance {
            id: id.to_string(),
            source: Box::new(other),
        },
    }
}

/// Shared optimisation loop: seeded shuffled passes over `0..pool`,
/// warmup/cosine schedule, AdamW on whatever the store marks trainable.
/// `on_step` may stop the run early by returning `Break`.
fn run<T: Scalar, B: BatchLoss<T>>(
    model: &mut Model<T>,
    source: &mut B,
    pool: usize,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry) -> ControlFlow<()>,
) -> Result<TrainReport> {
    cfg.check()?;
    if pool == 0 {
        return Err(Error::EmptyCorpus);
    }
    let total = cfg.total_steps(pool);
    let mut report = TrainReport {
        total_steps: total,
        ..Default::default()
    };
    if total == 0 {
        return Ok(report);
    }
    lr_at(0, cfg, total)?;
    let mut order_rng = SeededRng::derive(cfg.seed, "batch-order");
    let mut template_rng = SeededRng::derive(cfg.seed, "templates");
    let mut opt = AdamW::from_config(cfg);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=total {
        let mut items = Vec::with_capacity(cfg.batch_size);
        while items.len() < cfg.batch_size.min(pool) {
            if cursor == order.len() {
                order = (0..pool).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
                // a pass boundary ends the batch so passes do not mix
                if !items.is_empty() {
                    break;
                }
            }
            items.push(order[cursor]);
            cursor += 1;
        }
        model.store.zero_grads();
        let loss = source.batch(model, &items, &mut template_rng)?;
        if !loss.is_finite() {
            return Err(Error::NanGradient(format!("loss at step {step}")));
        }
        let lr = lr_at(step, cfg, total)?;
        opt.update(&mut model.store, lr)?;
        report.losses.push(loss);
        let entry = LogEntry { step, lr, loss };
        let stop = on_step(&entry).is_break();
        if step == 1 || step == total || stop || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            log::info!("step {step}/{total} lr {lr:.3e} loss {loss:.4}");
            report.log.push(entry);
        }
        if stop {
            break;
        }
    }
    Ok(report)
}

/// Instruction tuning over prepared examples. The freeze partition is
/// applied to the store first.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    pool: &[Example],
    templates: &BTreeMap<String, Vec<InstructionTemplate>>,
    cfg: &TrainConfig,
    on_step: impl FnMut(&LogEntry) -> ControlFlow<()>,
) -> Result<TrainReport> {
    freeze_partition(&mut model.store, cfg.unfreeze_all)?;
    let mut source = InstructionBatches {
        pool,
        templates,
        pages: PageCache::new(),
        vision_in_graph: cfg.unfreeze_all,
    };
    run(model, &mut source, pool.len(), cfg, on_step)
}

/// Sequence pair for LM pretraining. `doc` lists tokens whose LM
/// embeddings fill the first document slots; the remaining slots are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainPair {
    pub doc: Vec<usize>,
    pub instruction: Vec<usize>,
    pub ocr: Vec<usize>,
    pub targets: Vec<usize>,
}

struct PretrainBatches<'a> {
    pairs: &'a [PretrainPair],
}

impl<T: Scalar> BatchLoss<T> for PretrainBatches<'_> {
    fn batch(&mut self, model: &mut Model<T>, items: &[usize], _: &mut SeededRng) -> Result<f64> {
        let tokens: usize = items.iter().map(|&i| self.pairs[i].targets.len()).sum();
        if tokens == 0 {
            return Err(Error::NoTargets);
        }
        let scale = 1.0 / tokens as f64;
        let mut total = 0.0;
        let m = model.cfg.tokens;
        for &i in items {
            let p = &self.pairs[i];
            let mut g = Graph::new();
            let filled = p.doc.len().min(m);
            let emb = g.param(&model.store, model.lm.embed);
            let mut parts = Vec::with_capacity(2);
            if filled > 0 {
                parts.push(g.embedding(emb, &p.doc[..filled])?);
            }
            if filled < m {
                parts.push(g.constant(Tensor::zeros(&[m - filled, model.cfg.lm_dim])));
            }
            let h = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
            let (sum, _, _) = model.lm.loss_sum(&mut g, &model.store, h, &p.instruction, &p.ocr, &p.targets)?;
            let loss = g.scale(sum, scale);
            total += g.value(loss).item().as_f64();
            g.backward_into(loss, &mut model.store)?;
        }
        Ok(total)
    }
}

/// Trains only the `lm.` parameters on sequence pairs.
pub fn pretrain_lm<T: Scalar>(
    model: &mut Model<T>,
    pairs: &[PretrainPair],
    cfg: &TrainConfig,
    on_step: impl FnMut(&LogEntry) -> ControlFlow<()>,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for p in model.store.iter_mut() {
        p.trainable = has_prefix(&p.name, Seq2SeqLm::PREFIX);
    }
    let report = run(model, &mut PretrainBatches { pairs }, pairs.len(), cfg, on_step);
    freeze_partition(&mut model.store, false)?;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    fn cfg(peak: f64, warmup: usize) -> TrainConfig {
        TrainConfig {
            peak_lr: peak,
            warmup_steps: warmup,
            ..Default::default()
        }
    }

    #[test]
    fn partition_examples() {
        let mut s = ParamStore::<f32>::new();
        for n in ["docformer.block0.ffn.w1", "lm.decoder.block1.attn.wq", "encoder_tables.W_x", "vision.pos"] {
            s.add(n, Tensor::zeros(&[1]), true);
        }
        let p = freeze_partition(&mut s, false).unwrap();
        assert_eq!(p.trainable, ["docformer.block0.ffn.w1", "encoder_tables.W_x"]);
        assert_eq!(p.frozen, ["lm.decoder.block1.attn.wq", "vision.pos"]);
        assert!(!s.by_name("vision.pos").unwrap().trainable);

        let p = freeze_partition(&mut s, true).unwrap();
        assert_eq!(p.trainable.len(), 4);

        s.add("lmx.w", Tensor::zeros(&[1]), true);
        assert!(matches!(freeze_partition(&mut s, false), Err(Error::Partition(n)) if n == "lmx.w"));
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1e-4, 1000);
        assert_eq!(lr_at(1000, &c, 5000).unwrap(), 1e-4);
        assert!((lr_at(500, &c, 5000).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(5000, &c, 5000).unwrap().abs() < 1e-20);
        assert!(matches!(lr_at(10, &c, 1000), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_non_increasing_after_warmup() {
        let c = cfg(3e-4, 50);
        let mut prev = lr_at(50, &c, 400).unwrap();
        for s in 51..=400 {
            let lr = lr_at(s, &c, 400).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        let a = lr_at(50, &c, 400).unwrap();
        let b = lr_at(51, &c, 400).unwrap();
        assert!((a - b).abs() < 1e-4 * a);
    }

    fn matrix_store(vals: [f64; 4], grads: [f64; 4]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("docformer.w", Tensor::matrix(2, 2, vals.to_vec()).unwrap(), true);
        s.get_mut(id).grad = Tensor::matrix(2, 2, grads.to_vec()).unwrap();
        s
    }

    #[test]
    fn pure_decay_step() {
        let mut s = matrix_store([1.0, -2.0, 3.0, 0.5], [0.0; 4]);
        AdamW::new(0.9, 0.999, 1e-8, 0.05).update(&mut s, 0.1).unwrap();
        let got = s.by_name("docformer.w").unwrap().tensor.data().to_vec();
        for (g, w) in got.iter().zip([1.0, -2.0, 3.0, 0.5]) {
            assert!((g - 0.995 * w).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_sign_sized() {
        let grads = [0.3, -2.0, 1e-3, 7.0];
        let mut s = matrix_store([0.0; 4], grads);
        AdamW::new(0.9, 0.999, 1e-8, 0.0).update(&mut s, 0.01).unwrap();
        let got = s.by_name("docformer.w").unwrap().tensor.data().to_vec();
        for (w, g) in got.iter().zip(grads) {
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
        }
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut s = matrix_store([1.0, 2.0, 3.0, 4.0], [0.0; 4]);
        AdamW::new(0.9, 0.999, 1e-8, 0.0).update(&mut s, 0.1).unwrap();
        assert_eq!(s.by_name("docformer.w").unwrap().tensor.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn biases_not_decayed() {
        let mut s = ParamStore::<f64>::new();
        s.add("docformer.b", Tensor::full(&[1, 3], 2.0), true);
        AdamW::new(0.9, 0.999, 1e-8, 0.5).update(&mut s, 0.1).unwrap();
        assert_eq!(s.by_name("docformer.b").unwrap().tensor.data(), &[2.0; 3]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = matrix_store([1.0; 4], [0.0, f64::NAN, 0.0, 0.0]);
        let before = s.clone();
        let r = AdamW::new(0.9, 0.999, 1e-8, 0.05).update(&mut s, 0.1);
        assert!(matches!(r, Err(Error::NanGradient(n)) if n == "docformer.w"));
        assert_eq!(s.by_name("docformer.w").unwrap().tensor, before.by_name("docformer.w").unwrap().tensor);
    }
}
