//! Loss combination, learning-rate schedule, data mixing and the training
//! loop.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Mat, NodeId};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::tasks::{GroundingMode, TrainingExample};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeeSupervision {
    #[default]
    AuxiliaryOnly,
    AuxiliaryAndDownstream,
}

impl SeeSupervision {
    pub fn as_str(self) -> &'static str {
        match self {
            SeeSupervision::AuxiliaryOnly => "auxiliary_only",
            SeeSupervision::AuxiliaryAndDownstream => "auxiliary_and_downstream",
        }
    }
}

impl fmt::Display for SeeSupervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeeSupervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auxiliary_only" => Ok(SeeSupervision::AuxiliaryOnly),
            "auxiliary_and_downstream" => Ok(SeeSupervision::AuxiliaryAndDownstream),
            _ => Err(Error::Invalid(format!(
                "unknown see supervision {s:?} (expected auxiliary_only or auxiliary_and_downstream)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grounding_mode: GroundingMode,
    /// Auxiliary : downstream draws per cycle.
    pub mix_ratio: [usize; 2],
    pub see_supervision: SeeSupervision,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            peak_lr: 3e-4,
            warmup_frac: 0.10,
            total_steps: 1000,
            batch_size: 8,
            seed: 0,
            grounding_mode: GroundingMode::SeeFirst,
            mix_ratio: [1, 1],
            see_supervision: SeeSupervision::AuxiliaryOnly,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Peak rate for full-size runs on real hardware.
    pub const FULL_SCALE_PEAK_LR: f64 = 5e-5;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!("warmup fraction must be in (0, 1), got {}", self.warmup_frac));
        }
        if self.total_steps == 0 {
            return bad("total steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak learning rate must be positive, got {}", self.peak_lr));
        }
        if self.mix_ratio.iter().any(|&r| r == 0) {
            return bad("mix ratio entries must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }
}

pub fn total_loss(lm: f64, see: f64, lambda: f64) -> f64 {
    lm + lambda * see
}

/// Linear warmup from 0 to `peak` over the first `warmup_frac` of the
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    let total = total_steps as f64;
    let s = (step as f64).min(total);
    let warm = warmup_frac * total;
    if s < warm {
        peak * s / warm
    } else if total > warm {
        peak * (total - s) / (total - warm)
    } else {
        peak
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Mat> = model
            .params()
            .iter()
            .map(|(_, m)| Mat::zeros(m.raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = model.params_mut().get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

struct Source {
    examples: Vec<TrainingExample>,
    strip_see: bool,
    salt: u64,
}

/// Deterministic, indexable example stream. Each source is reshuffled every
/// pass with a seed derived from the pass number; draws cycle through the
/// sources by the configured ratio, so shorter sources repeat.
pub struct ExampleStream {
    sources: Vec<Source>,
    pattern: Vec<usize>,
    seed: u64,
}

impl ExampleStream {
    pub fn single(examples: Vec<TrainingExample>, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("training stream is empty".into()));
        }
        Ok(ExampleStream {
            sources: vec![Source {
                examples,
                strip_see: false,
                salt: 0,
            }],
            pattern: vec![0],
            seed,
        })
    }

    /// Which source draw `i` comes from (0 = auxiliary in a mixed stream).
    pub fn source_of(&self, i: usize) -> usize {
        self.pattern[i % self.pattern.len()]
    }

    pub fn get(&self, i: usize) -> TrainingExample {
        let p = self.pattern.len();
        let src = self.pattern[i % p];
        let cycle = i / p;
        let within = cycle * self.pattern[..].iter().filter(|&&s| s == src).count()
            + self.pattern[..i % p].iter().filter(|&&s| s == src).count();
        let source = &self.sources[src];
        let n = source.examples.len();
        let pass = within / n;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ source.salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (pass as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9),
        );
        order.shuffle(&mut rng);
        let mut ex = source.examples[order[within % n]].clone();
        if source.strip_see {
            ex.see_targets.clear();
        }
        ex
    }

    pub fn batch(&self, step: usize, size: usize) -> Vec<TrainingExample> {
        (step * size..(step + 1) * size).map(|i| self.get(i)).collect()
    }

    pub fn source_len(&self, src: usize) -> usize {
        self.sources[src].examples.len()
    }
}

/// Interleaves an auxiliary and a downstream stream at `ratio`
/// (auxiliary : downstream). Under `AuxiliaryOnly`, downstream examples
/// lose their see targets.
pub fn mix_datasets(
    downstream: Vec<TrainingExample>,
    auxiliary: Vec<TrainingExample>,
    seed: u64,
    ratio: [usize; 2],
    supervision: SeeSupervision,
) -> Result<ExampleStream> {
    if downstream.is_empty() || auxiliary.is_empty() {
        return Err(Error::Invalid("cannot mix an empty stream".into()));
    }
    if ratio.iter().any(|&r| r == 0) {
        return Err(Error::Config("mix ratio entries must be positive".into()));
    }
    let (a, d) = (ratio[0], ratio[1]);
    // spread the draws evenly over one cycle
    let total = a + d;
    let pattern = (0..total)
        .map(|k| usize::from((k + 1) * d / total != k * d / total))
        .collect();
    Ok(ExampleStream {
        sources: vec![
            Source {
                examples: auxiliary,
                strip_see: false,
                salt: 1,
            },
            Source {
                examples: downstream,
                strip_see: supervision == SeeSupervision::AuxiliaryOnly,
                salt: 2,
            },
        ],
        pattern,
        seed,
    })
}

/// Loss nodes for one batch recorded on a graph.
pub struct BatchLoss {
    pub total: NodeId,
    pub lm: f64,
    /// Mean see loss over examples that carry see targets (0 if none).
    pub see: f64,
    pub supervised: usize,
}

/// Records the teacher-forced objective for `batch`. The LM term averages
/// token losses within each example, then over the batch; the see term
/// averages over each example's see targets, then over supervised
/// examples.
pub fn record_batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[TrainingExample],
    lambda: f64,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut lm_terms = Vec::with_capacity(batch.len());
    let mut see_terms = Vec::new();
    for ex in batch {
        let tq = ex.prompt_ids.len();
        let ta = ex.target_ids.len();
        if tq == 0 || ta == 0 {
            return Err(Error::Invalid(format!("example {} has an empty prompt or target", ex.source_id)));
        }
        let z = model.encode(g, &ex.pixels)?;
        let h = model.decode(g, z, &ex.decoder_input())?;
        let rows = g.slice_rows(h, tq - 1, ta);
        let logits = model.logits(g, rows);
        lm_terms.push(g.cross_entropy(logits, &ex.target_ids));
        if !ex.see_targets.is_empty() {
            let pos: Vec<usize> = ex.see_targets.iter().map(|(p, _)| tq + p).collect();
            let targets: Vec<f64> = ex
                .see_targets
                .iter()
                .flat_map(|(_, q)| q.values().map(|v| v as f64))
                .collect();
            let hs = g.gather(h, &pos);
            let gl = model.grounding_logits(g, hs);
            see_terms.push(g.see_mse(gl, &targets));
        }
    }
    let b = batch.len() as f64;
    let lm_w: Vec<_> = lm_terms.iter().map(|&n| (n, 1.0 / b)).collect();
    let lm = g.weighted_sum(&lm_w);
    let supervised = see_terms.len();
    let see_w: Vec<_> = see_terms
        .iter()
        .map(|&n| (n, 1.0 / supervised.max(1) as f64))
        .collect();
    let see = g.weighted_sum(&see_w);
    let total = g.weighted_sum(&[(lm, 1.0), (see, lambda)]);
    Ok(BatchLoss {
        total,
        lm: g.scalar(lm),
        see: g.scalar(see),
        supervised,
    })
}

/// Objective value of a batch without gradients.
pub fn batch_loss(model: &Model, batch: &[TrainingExample], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = record_batch_loss(&mut g, model, batch, lambda)?;
    Ok(g.scalar(l.total))
}

/// Objective, its parts, and the unclipped parameter gradients.
pub fn batch_gradients(
    model: &Model,
    batch: &[TrainingExample],
    lambda: f64,
) -> Result<(f64, BatchLoss, Grads)> {
    let mut g = Graph::new();
    let l = record_batch_loss(&mut g, model, batch, lambda)?;
    let grads = g.backward(l.total, model.params());
    Ok((g.scalar(l.total), l, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub see_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, o: &StepRecord) -> bool {
        self.step == o.step
            && self.lm_loss.to_bits() == o.lm_loss.to_bits()
            && self.see_loss.to_bits() == o.see_loss.to_bits()
            && self.lr.to_bits() == o.lr.to_bits()
    }
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Where metrics, checkpoints and failure dumps go. Nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total steps (as if interrupted).
    pub stop_at_step: Option<usize>,
    /// Continue from a checkpoint written by this loop.
    pub resume: Option<Checkpoint>,
    /// Vocabulary charset stored in checkpoints.
    pub charset: String,
    /// Extra metadata copied into checkpoints.
    pub meta: serde_json::Value,
}

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub steps_done: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_lm_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.lm_loss)
    }
}

fn checkpoint_with_state(
    model: &Model,
    opt: &Adam,
    step: usize,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Checkpoint {
    let meta = serde_json::json!({
        "step": step,
        "adam_t": opt.t,
        "train": cfg,
        "extra": opts.meta,
    });
    let mut ck = Checkpoint::from_model(model, &opts.charset, meta);
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        ck.arrays.push((format!("opt.m.{name}"), opt.m[k].clone()));
        ck.arrays.push((format!("opt.v.{name}"), opt.v[k].clone()));
    }
    ck
}

fn restore(ck: &Checkpoint, model: &mut Model, opt: &mut Adam) -> Result<usize> {
    *model = ck.to_model()?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let m = ck
            .array(&format!("opt.m.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
        let v = ck
            .array(&format!("opt.v.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
        opt.m[k] = m.clone();
        opt.v[k] = v.clone();
    }
    opt.t = ck.meta["adam_t"].as_u64().unwrap_or(0) as usize;
    ck.meta["step"]
        .as_u64()
        .map(|s| s as usize)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no step".into()))
}

fn dump_batch(dir: &Path, step: usize, batch: &[TrainingExample]) -> Option<PathBuf> {
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let dump: Vec<_> = batch
        .iter()
        .map(|ex| {
            serde_json::json!({
                "source_id": ex.source_id,
                "task": ex.task,
                "prompt_ids": ex.prompt_ids,
                "target_ids": ex.target_ids,
                "see_targets": ex.see_targets,
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&dump).ok()?;
    fs::write(&path, text).ok()?;
    Some(path)
}

/// Teacher-forced training. The batch for step `s` is draws
/// `s*B .. (s+1)*B` of `stream`, so a resumed run sees exactly the data an
/// uninterrupted run would.
pub fn train_loop(
    cfg: &TrainConfig,
    model: &mut Model,
    stream: &ExampleStream,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = Adam::new(model, cfg);
    let mut start = 0;
    if let Some(ck) = &opts.resume {
        start = restore(ck, model, &mut opt)?;
        log::info!("resuming at step {start}");
    }
    let end = opts.stop_at_step.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut metrics = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = fs::OpenOptions::new()
                .create(true)
                .append(start > 0)
                .write(true)
                .truncate(start == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let t0 = Instant::now();
    let mut records = Vec::with_capacity(end.saturating_sub(start));
    let mut checkpoint = None;
    let save = |model: &Model, opt: &Adam, step: usize| -> Result<Option<PathBuf>> {
        match &opts.out_dir {
            Some(dir) => {
                let path = dir.join(CHECKPOINT_FILE);
                checkpoint_with_state(model, opt, step, cfg, opts).save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };
    for step in start..end {
        let batch = stream.batch(step, cfg.batch_size);
        let (total, parts, mut grads) = batch_gradients(model, &batch, cfg.lambda)?;
        let norm = grads.global_norm();
        if !total.is_finite() || !norm.is_finite() {
            let dumped = opts.out_dir.as_deref().and_then(|d| dump_batch(d, step, &batch));
            let ids: Vec<_> = batch.iter().map(|e| e.source_id.as_str()).collect();
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "lm {} see {} grad norm {norm}; batch {ids:?}{}",
                    parts.lm,
                    parts.see,
                    dumped.map(|p| format!(", dumped to {}", p.display())).unwrap_or_default()
                ),
            });
        }
        clip_grad_norm(&mut grads, cfg.clip_norm);
        let lr = lr_schedule(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_frac);
        opt.step(model, &grads, lr);
        let rec = StepRecord {
            step,
            lm_loss: parts.lm,
            // λ = 0 runs log a constant so ablation curves stay comparable
            see_loss: if cfg.lambda == 0.0 { 0.0 } else { parts.see },
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if let Some((f, path)) = metrics.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            writeln!(f).map_err(|e| Error::io(&*path, e))?;
        }
        if step % 100 == 0 {
            log::debug!("step {step} lm {:.4} see {:.1} lr {lr:.2e}", rec.lm_loss, rec.see_loss);
        }
        records.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < end {
            checkpoint = save(model, &opt, step + 1)?;
        }
    }
    if end > start || opts.resume.is_none() {
        checkpoint = save(model, &opt, end)?.or(checkpoint);
    }
    Ok(TrainReport {
        records,
        steps_done: end,
        checkpoint,
    })
}

/// Reads a metrics log written by [`train_loop`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
