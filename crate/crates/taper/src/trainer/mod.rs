//! Training loops: teacher pre-training (plain masked-LM) and the joint
//! distill-and-prune loop.
//!
//! Each distillation step runs in this order: compute the weighted total
//! loss, update the student and projections with Adam, fold the step's
//! |theta * grad| observations into the EMA importance buffers, rebuild the
//! group masks at the scheduled kept-fraction, and zero the masked weights
//! together with their optimizer moments. Gradients for scoring are the ones
//! from this step's backward pass; no second backward runs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, MlmBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{
    batch_losses, batch_mlm_loss, KlDirection, LossBundle, LossWeights, ProjectionSet,
};
use crate::model::{ForwardOutput, ModelConfig, TransformerModel};
use crate::pruning::{
    apply_masks, build_masks, coupling_groups, fractions_at, final_fractions, scored_tensor_names,
    zero_masked_in_named_buffers, CouplingGroup, GroupId, GroupKind, ImportanceState, MaskSet,
    ScorerKind, SparsitySchedule,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub kl_direction: KlDirection,
    pub schedule: SparsitySchedule,
    pub scorer: ScorerKind,
    pub ema_beta: f64,
    pub platon_beta: f64,
    pub monotone_masks: bool,
    pub prune_interval: usize,
    pub log_interval: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must lie in [0, 1)", name)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema_beta must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.platon_beta) {
            return Err(Error::Config("platon_beta must lie in [0, 1)".into()));
        }
        if self.prune_interval == 0 {
            return Err(Error::Config("prune_interval must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.schedule.total_steps != self.total_steps {
            return Err(Error::Config(format!(
                "schedule covers {} steps but training runs {}",
                self.schedule.total_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup_frac * total` steps, then linear
/// decay to zero at `total`.
pub fn learning_rate_at(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    assert!(total >= 1);
    let warmup = (warmup_frac * total as f64).floor() as usize;
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

/// Adam with bias correction and decoupled weight decay. Decay applies only
/// to matrices (2-D tensors); biases and layernorm parameters are exempt.
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new(shapes: &BTreeMap<String, Vec<usize>>) -> AdamState {
        let zeros = |shapes: &BTreeMap<String, Vec<usize>>| {
            shapes
                .iter()
                .map(|(k, s)| (k.clone(), vec![0.0; s.iter().product()]))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState { m: zeros(shapes), v: zeros(shapes), step: 0 }
    }

    pub fn update(
        &mut self,
        params: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);

        let clip_scale = match cfg.grad_clip {
            Some(c) => {
                let mut sq = 0.0;
                for t in params.values() {
                    if let Some(g) = t.grad() {
                        sq += g.iter().map(|x| x * x).sum::<f64>();
                    }
                }
                let norm = sq.sqrt();
                if !norm.is_finite() {
                    return Err(Error::Numeric(format!("gradient norm is {}", norm)));
                }
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        for (name, t) in params {
            let Some(grad) = t.grad() else { continue };
            let m = self.m.get_mut(name).expect("moment buffer missing");
            let v = self.v.get_mut(name).expect("moment buffer missing");
            let decay = if t.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            t.apply(|data| {
                for i in 0..data.len() {
                    let g = grad[i] * clip_scale;
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * data[i]);
                }
            });
        }
        Ok(())
    }
}

/// One metrics entry. The wall-clock field stays in memory only so that
/// logs are byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    /// Scheduled kept-fraction per group kind at this iteration.
    pub fractions: BTreeMap<GroupKind, f64>,
    /// Live column counts of representative groups (hidden, layer-0 head-0
    /// attention groups, layer-0 ffn).
    pub widths: BTreeMap<GroupKind, usize>,
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

/// The joint distill-and-prune loop over a frozen teacher.
pub struct Trainer {
    pub teacher: TransformerModel,
    pub student: TransformerModel,
    pub projections: ProjectionSet,
    pub masks: MaskSet,
    pub groups: Vec<CouplingGroup>,
    pub importance: ImportanceState,
    pub adam: AdamState,
    adam_cfg: AdamConfig,
    pub cfg: TrainConfig,
    trainable: BTreeMap<String, Tensor>,
    shapes: BTreeMap<String, Vec<usize>>,
    pub step: usize,
}

impl Trainer {
    /// Initialize the student as an exact copy of the teacher. The teacher
    /// is frozen; the student and the projections train.
    pub fn new(teacher: TransformerModel, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        teacher.config.validate()?;
        teacher.set_trainable(false);
        let student = teacher.clone_model();
        student.set_trainable(true);

        let d = teacher.config.hidden_dim;
        let mut proj_rng = rng_stream(cfg.seed, streams::PROJECTIONS);
        let projections = ProjectionSet::new(d, d, &mut proj_rng);

        let groups = coupling_groups(&student.config);
        let masks = MaskSet::all_ones(&groups);

        let mut shapes: BTreeMap<String, Vec<usize>> = student
            .named_params()
            .iter()
            .map(|(k, v)| (k.clone(), v.shape()))
            .collect();
        shapes.insert(crate::pruning::PROJ_HIDN.into(), projections.w_hidn.shape());
        shapes.insert(crate::pruning::PROJ_EMB.into(), projections.w_emb.shape());

        let mut trainable: BTreeMap<String, Tensor> = student
            .named_params()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        trainable.insert(crate::pruning::PROJ_HIDN.into(), projections.w_hidn.clone());
        trainable.insert(crate::pruning::PROJ_EMB.into(), projections.w_emb.clone());

        let scored: BTreeMap<String, Vec<usize>> = scored_tensor_names(&groups)
            .into_iter()
            .map(|n| {
                let s = shapes[&n].clone();
                (n, s)
            })
            .collect();
        let importance = ImportanceState::new(cfg.scorer, cfg.ema_beta, cfg.platon_beta, scored);

        let adam = AdamState::new(&shapes);
        let adam_cfg = AdamConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
        };

        Ok(Trainer {
            teacher,
            student,
            projections,
            masks,
            groups,
            importance,
            adam,
            adam_cfg,
            cfg,
            trainable,
            shapes,
            step: 0,
        })
    }

    fn forward_batch(model: &TransformerModel, batch: &MlmBatch) -> Vec<ForwardOutput> {
        (0..batch.len())
            .map(|i| model.forward(&batch.token_ids[i], &batch.pad_mask[i]))
            .collect()
    }

    fn zero_grads(&self) {
        self.student.zero_grads();
        self.projections.zero_grads();
    }

    fn compute_losses(&self, batch: &MlmBatch) -> (Tensor, LossBundle) {
        let teacher_outs = Self::forward_batch(&self.teacher, batch);
        let student_outs = Self::forward_batch(&self.student, batch);
        batch_losses(
            &teacher_outs,
            &student_outs,
            batch,
            &self.projections,
            &self.cfg.weights,
            self.cfg.kl_direction,
        )
    }

    fn observe_scores(&mut self) {
        let names: Vec<String> = self.importance.tracked_names().cloned().collect();
        for name in names {
            let t = &self.trainable[&name];
            let grads = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            self.importance.observe(&name, &t.to_vec(), &grads);
        }
    }

    fn prune_to(&mut self, fractions: &BTreeMap<GroupId, f64>) {
        let previous = self.cfg.monotone_masks.then(|| self.masks.clone());
        self.masks = build_masks(&self.importance, fractions, &self.groups, previous.as_ref());
        apply_masks(&mut self.student, Some(&self.projections), &self.masks, &self.groups);
        zero_masked_in_named_buffers(&mut self.adam.m, &self.shapes, &self.masks, &self.groups);
        zero_masked_in_named_buffers(&mut self.adam.v, &self.shapes, &self.masks, &self.groups);
    }

    /// When the schedule starts below a kept-fraction of one (single-shot
    /// pruning), score once on `batch` without updating weights and apply
    /// the step-0 masks before training begins.
    pub fn initial_prune(&mut self, batch: &MlmBatch) -> Result<()> {
        if !self.cfg.schedule.prunes_at_start() {
            return Ok(());
        }
        self.zero_grads();
        let (total, bundle) = self.compute_losses(batch);
        check_finite(&bundle, 0)?;
        total.backward();
        self.observe_scores();
        let fractions = fractions_at(&self.cfg.schedule, 0, &self.groups);
        self.prune_to(&fractions);
        self.zero_grads();
        Ok(())
    }

    /// One full iteration: loss, Adam update, importance observation, mask
    /// rebuild and application.
    pub fn train_step(&mut self, batch: &MlmBatch) -> Result<MetricsRecord> {
        let start = Instant::now();
        if self.step >= self.cfg.total_steps {
            return Err(Error::Config(format!(
                "train_step called past total_steps {}",
                self.cfg.total_steps
            )));
        }
        self.zero_grads();
        let (total, bundle) = self.compute_losses(batch);
        check_finite(&bundle, self.step)?;
        total.backward();

        let lr = learning_rate_at(
            self.step,
            self.cfg.total_steps,
            self.cfg.learning_rate,
            self.cfg.warmup_frac,
        );
        self.adam.update(&self.trainable, lr, &self.adam_cfg)?;

        self.observe_scores();
        let fractions = fractions_at(&self.cfg.schedule, self.step, &self.groups);
        if self.step % self.cfg.prune_interval == 0 {
            self.prune_to(&fractions);
        }

        let record = MetricsRecord {
            iteration: self.step,
            losses: bundle,
            fractions: kind_fractions(&fractions),
            widths: self.kind_widths(),
            wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(record)
    }

    /// Apply the terminal masks at the final kept-fraction, so exported
    /// widths equal ceil(r_f * width) even if the schedule never completed.
    pub fn finalize(&mut self) {
        let fractions = final_fractions(&self.cfg.schedule, &self.groups);
        self.prune_to(&fractions);
    }

    fn kind_widths(&self) -> BTreeMap<GroupKind, usize> {
        let mut widths = BTreeMap::new();
        widths.insert(GroupKind::Hidden, self.masks.kept(GroupId::Hidden));
        widths.insert(GroupKind::QueryKey, self.masks.kept(GroupId::QueryKey { layer: 0, head: 0 }));
        widths
            .insert(GroupKind::ValueOutput, self.masks.kept(GroupId::ValueOutput { layer: 0, head: 0 }));
        widths.insert(GroupKind::FfnInner, self.masks.kept(GroupId::FfnInner { layer: 0 }));
        widths
    }
}

fn kind_fractions(fractions: &BTreeMap<GroupId, f64>) -> BTreeMap<GroupKind, f64> {
    let mut out = BTreeMap::new();
    for (id, &r) in fractions {
        out.entry(id.kind()).or_insert(r);
    }
    out
}

fn check_finite(bundle: &LossBundle, step: usize) -> Result<()> {
    if !bundle.total.is_finite() {
        return Err(Error::Numeric(format!(
            "NaN loss at iteration {}: mlm={} kd={} hidden={} emb={} attn={} total={}",
            step, bundle.mlm, bundle.kd, bundle.hidden, bundle.emb, bundle.attn, bundle.total
        )));
    }
    Ok(())
}

/// rng sub-streams derived from one run seed.
pub mod streams {
    pub const MODEL_INIT: u64 = 0;
    pub const PROJECTIONS: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const EVAL: u64 = 3;
}

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Corpus windows plus tokenizer for one run.
pub struct RunData {
    pub vocab: Vocabulary,
    pub train_windows: Vec<Vec<usize>>,
    pub eval_windows: Vec<Vec<usize>>,
    pub mask_prob: f64,
}

pub struct DistillOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<MetricsRecord>,
}

/// Run the full distillation loop: clone the teacher into the student,
/// iterate `total_steps` batches, prune on schedule, and finish at the
/// target widths. Bit-reproducible for a fixed (seed, config, corpus).
pub fn distill(teacher: TransformerModel, cfg: &TrainConfig, data: &RunData) -> Result<DistillOutcome> {
    cfg.validate()?;
    if data.train_windows.is_empty() {
        return Err(Error::Input("no training windows".into()));
    }
    let mut trainer = Trainer::new(teacher, cfg.clone())?;
    let mut stream = BatchStream::new(
        data.train_windows.clone(),
        data.vocab.clone(),
        cfg.batch_size,
        data.mask_prob,
        stream_seed(cfg.seed, streams::BATCHES),
    );

    let first_batch = stream.next_batch()?;
    trainer.initial_prune(&first_batch)?;

    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for t in 0..cfg.total_steps {
        let batch = if t == 0 { first_batch.clone() } else { stream.next_batch()? };
        metrics.push(trainer.train_step(&batch)?);
    }
    trainer.finalize();
    Ok(DistillOutcome { trainer, metrics })
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    // BatchStream owns a plain seed; fold the stream id in.
    seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(stream)
}

/// Train a fresh model with the masked-LM loss alone (no teacher, no
/// pruning). Produces the toy teacher for later distillation runs.
pub fn pretrain_teacher(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &RunData,
) -> Result<(TransformerModel, Vec<MetricsRecord>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.train_windows.is_empty() {
        return Err(Error::Input("no training windows".into()));
    }
    let mut rng = rng_stream(cfg.seed, streams::MODEL_INIT);
    let model = TransformerModel::new(model_cfg.clone(), &mut rng);
    let shapes: BTreeMap<String, Vec<usize>> =
        model.named_params().iter().map(|(k, v)| (k.clone(), v.shape())).collect();
    let trainable: BTreeMap<String, Tensor> =
        model.named_params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut adam = AdamState::new(&shapes);
    let adam_cfg = AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
    };
    let mut stream = BatchStream::new(
        data.train_windows.clone(),
        data.vocab.clone(),
        cfg.batch_size,
        data.mask_prob,
        stream_seed(cfg.seed, streams::BATCHES),
    );

    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for t in 0..cfg.total_steps {
        let start = Instant::now();
        let batch = stream.next_batch()?;
        model.zero_grads();
        let outs = Trainer::forward_batch(&model, &batch);
        let loss = batch_mlm_loss(&outs, &batch);
        let value = loss.item();
        let bundle = LossBundle { mlm: value, kd: 0.0, hidden: 0.0, emb: 0.0, attn: 0.0, total: value };
        check_finite(&bundle, t)?;
        loss.backward();
        let lr = learning_rate_at(t, cfg.total_steps, cfg.learning_rate, cfg.warmup_frac);
        adam.update(&trainable, lr, &adam_cfg)?;
        metrics.push(MetricsRecord {
            iteration: t,
            losses: bundle,
            fractions: BTreeMap::new(),
            widths: BTreeMap::new(),
            wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((model, metrics))
}

/// Mean masked-LM loss of a model over held-out windows, with a fixed
/// corruption seed so evaluations are comparable across runs and steps.
pub fn eval_mlm(
    model: &TransformerModel,
    windows: &[Vec<usize>],
    vocab: &Vocabulary,
    batch_size: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Input("no evaluation windows".into()));
    }
    let batches =
        crate::data::eval_batches(windows, vocab, batch_size, mask_prob, stream_seed(seed, streams::EVAL))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in &batches {
        let outs = Trainer::forward_batch(model, batch);
        total += batch_mlm_loss(&outs, batch).item() * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}
