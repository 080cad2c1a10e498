//! Training stages: teachers, student initialization and distillation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, make_triplets, SplitDataset, Triplet};
use crate::error::{Error, Result};
use crate::losses::{self, DistillConfig, TripletRows};
use crate::metrics;
use crate::nets::{copy_parameters, Forward, Network, NetworkSpec, Normalizer, Outputs};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::optim::{nag_step, OptimizerState, DEFAULT_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Alignment,
    Verification,
}

impl Task {
    pub fn short_name(self) -> &'static str {
        match self {
            Task::Classification => "cls",
            Task::Alignment => "ali",
            Task::Verification => "ver",
        }
    }
}

/// Optimization settings of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub batch_size: usize,
    /// `(learning_rate, epochs)` phases, run in order.
    pub lr_schedule: Vec<(f64, usize)>,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(Error::Parameter("learning-rate schedule is empty".into()));
        }
        if let Some((lr, _)) = self.lr_schedule.iter().find(|(lr, _)| !(*lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Parameter(format!("grad_clip must be nonnegative, got {}", self.grad_clip)));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.lr_schedule.iter().map(|(_, e)| e).sum()
    }
}

/// Plan-wide optimization defaults from which stage configs are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs_per_phase: usize,
    pub scratch_rate: f64,
    pub continuation_rate: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub cls_batch: usize,
    pub ali_batch: usize,
    pub ver_batch: usize,
    /// Triplets drawn per verification epoch; 0 means one per training sample.
    pub triplets_per_epoch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_per_phase: 15,
            scratch_rate: 0.01,
            continuation_rate: 0.001,
            momentum: DEFAULT_MOMENTUM,
            grad_clip: 5.0,
            cls_batch: 64,
            ali_batch: 32,
            ver_batch: 32,
            triplets_per_epoch: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage(Task::Classification, false, 0).validate()?;
        self.stage(Task::Alignment, true, 0).validate()?;
        self.stage(Task::Verification, true, 0).validate()
    }

    /// Fresh networks run both rates; initialized ones continue at the lower.
    pub fn stage(&self, task: Task, initialized: bool, seed: u64) -> StageConfig {
        let e = self.epochs_per_phase;
        let lr_schedule = if initialized {
            vec![(self.continuation_rate, e)]
        } else {
            vec![(self.scratch_rate, e), (self.continuation_rate, e)]
        };
        let batch_size = match task {
            Task::Classification => self.cls_batch,
            Task::Alignment => self.ali_batch,
            Task::Verification => self.ver_batch,
        };
        StageConfig {
            batch_size,
            lr_schedule,
            momentum: self.momentum,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

/// Task-specific knobs shared by teacher and student stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    /// Adds the identity softmax loss to the triplet objective.
    pub include_softmax: bool,
    pub triplets_per_epoch: usize,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            include_softmax: true,
            triplets_per_epoch: 0,
        }
    }
}

/// A trained network with its per-step training losses.
#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    pub losses: Vec<f64>,
}

/// Train-split tensors shared by every batch of a stage.
struct TrainSet {
    features: Tensor,
    labels: Vec<usize>,
    keypoints: Option<Tensor>,
}

impl TrainSet {
    fn new(ds: &SplitDataset) -> Result<Self> {
        if ds.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let keypoints = if ds.num_keypoint_coords() > 0 {
            Some(data::keypoint_matrix(&ds.train)?)
        } else {
            None
        };
        Ok(Self {
            features: data::feature_matrix(&ds.train)?,
            labels: data::labels(&ds.train),
            keypoints,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

fn check_compatible(spec: &NetworkSpec, ds: &SplitDataset) -> Result<()> {
    if spec.input_dim != ds.input_dim() {
        return Err(Error::dim("dataset features", &[ds.input_dim()], &[spec.input_dim]));
    }
    if ds.num_identities() > spec.num_classes {
        return Err(Error::contract(format!(
            "dataset has {} identities but the network only {} classes",
            ds.num_identities(),
            spec.num_classes
        )));
    }
    Ok(())
}

/// Fresh network whose input normalizer is fitted on the training split.
pub fn fresh_network(spec: &NetworkSpec, ds: &SplitDataset, seed: u64) -> Result<Network> {
    check_compatible(spec, ds)?;
    let mut net = Network::build(spec, seed)?;
    let rows: Vec<&[f64]> = ds.train.iter().map(|s| s.features.as_slice()).collect();
    net.set_normalizer(Normalizer::fit(&rows)?)?;
    Ok(net)
}

fn copy_of(src: &Network) -> Result<Network> {
    let mut dst = Network::build(src.spec(), 0)?;
    copy_parameters(src, &mut dst)?;
    Ok(dst)
}

fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Rescales all gradients together so their joint norm is at most `max_norm`.
pub fn clip_gradients(net: &mut Network, max_norm: f64) -> f64 {
    let norm = net
        .params()
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in net.params_mut() {
            if let Some(g) = p.take_grad() {
                p.set_grad(g.into_iter().map(|v| v * scale).collect())
                    .expect("same length");
            }
        }
    }
    norm
}

/// Runs the learning-rate schedule. `batches` yields one epoch of batches;
/// `loss` records one batch on a fresh tape.
fn run_schedule<B>(
    net: &mut Network,
    stage: &StageConfig,
    mut batches: impl FnMut(&mut ChaCha8Rng) -> Result<Vec<B>>,
    mut loss: impl FnMut(&mut Tape, &Network, &B) -> Result<(Var, Forward)>,
) -> Result<Vec<f64>> {
    stage.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut opt = OptimizerState::for_network(net, stage.lr_schedule[0].0, stage.momentum)?;
    let mut losses = Vec::new();
    for &(lr, epochs) in &stage.lr_schedule {
        opt.learning_rate = lr;
        for _ in 0..epochs {
            for batch in batches(&mut rng)? {
                let mut tape = Tape::new();
                let (l, forward) = loss(&mut tape, net, &batch)?;
                let value = tape.value(l).item()?;
                if !value.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "training loss became {value} after {} steps",
                        losses.len()
                    )));
                }
                losses.push(value);
                tape.backward(l)?;
                net.store_grads(&tape, &forward)?;
                if stage.grad_clip > 0.0 {
                    clip_gradients(net, stage.grad_clip);
                }
                nag_step(net, &mut opt)?;
            }
        }
    }
    if !net.params().iter().all(Tensor::all_finite) {
        return Err(Error::Evaluation(format!("parameters diverged after {} steps", losses.len())));
    }
    Ok(losses)
}

/// Trains `net` in place on the identity softmax loss, or on the
/// classification distillation loss when a teacher is given.
fn train_cls(
    net: &mut Network,
    teacher: Option<(&Network, &DistillConfig)>,
    ds: &SplitDataset,
    stage: &StageConfig,
) -> Result<Vec<f64>> {
    let set = TrainSet::new(ds)?;
    let n = set.len();
    run_schedule(
        net,
        stage,
        |rng| Ok(shuffled_batches(rng, n, stage.batch_size)),
        |tape, net, idx| {
            let x = set.features.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let f = net.forward(tape, &x, true)?;
            let l = match teacher {
                Some((t, cfg)) => {
                    let tf = t.forward(tape, &x, false)?;
                    losses::distill_cls_loss(tape, f.outputs.logits, tf.outputs.logits, &y, cfg)?
                }
                None => losses::softmax_loss(tape, f.outputs.logits, &y)?,
            };
            Ok((l, f))
        },
    )
}

/// Teacher trained from a fresh build on the softmax loss.
pub fn train_teacher_cls(spec: &NetworkSpec, ds: &SplitDataset, stage: &StageConfig) -> Result<Trained> {
    let mut network = fresh_network(spec, ds, stage.seed)?;
    let losses = train_cls(&mut network, None, ds, stage)?;
    Ok(Trained { network, losses })
}

/// Student trained alone on the softmax loss.
pub fn init_student_cls(spec: &NetworkSpec, ds: &SplitDataset, stage: &StageConfig) -> Result<Trained> {
    train_teacher_cls(spec, ds, stage)
}

/// Where a student's parameters come from before a stage starts.
#[derive(Debug, Clone, Copy)]
pub enum StudentInit<'a> {
    Scratch,
    /// Value copy of an existing network with the student's spec.
    From(&'a Network),
}

/// Classification distillation from `teacher`, with teacher logits
/// recomputed on every batch.
pub fn distill_student_cls(
    teacher: &Network,
    student_spec: &NetworkSpec,
    init: StudentInit<'_>,
    ds: &SplitDataset,
    cfg: &DistillConfig,
    stage: &StageConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if teacher.spec().num_classes != student_spec.num_classes {
        return Err(Error::contract("teacher and student disagree on the number of classes"));
    }
    let mut network = match init {
        StudentInit::Scratch => fresh_network(student_spec, ds, stage.seed)?,
        StudentInit::From(src) => {
            if src.spec() != student_spec {
                return Err(Error::contract("initialization network has a different spec"));
            }
            copy_of(src)?
        }
    };
    let losses = train_cls(&mut network, Some((teacher, cfg)), ds, stage)?;
    Ok(Trained { network, losses })
}

/// Maps triplets over train indices onto a deduplicated sample batch.
fn dedup_triplets(triplets: &[Triplet]) -> (Vec<usize>, TripletRows) {
    let mut samples = Vec::new();
    let mut position = BTreeMap::new();
    let mut row = |i: usize| {
        *position.entry(i).or_insert_with(|| {
            samples.push(i);
            samples.len() - 1
        })
    };
    let mut rows = TripletRows::default();
    for &(a, p, n) in triplets {
        rows.anchor.push(row(a));
        rows.positive.push(row(p));
        rows.negative.push(row(n));
    }
    (samples, rows)
}

/// Fine-tunes `net` on a task objective, distilling from `teacher` when given.
fn train_task(
    net: &mut Network,
    teacher: Option<&Network>,
    task: Task,
    ds: &SplitDataset,
    cfg: &DistillConfig,
    opts: &TaskOptions,
    stage: &StageConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let set = TrainSet::new(ds)?;
    let n = set.len();
    // without a teacher only the task term remains
    let cfg = match teacher {
        Some(_) => *cfg,
        None => cfg.with_weights(0.0, 0.0),
    };
    let teacher_outputs = |tape: &mut Tape, x: &Tensor, student: &Outputs| -> Result<Outputs> {
        match teacher {
            Some(t) if cfg.alpha != 0.0 || cfg.beta != 0.0 => Ok(t.forward(tape, x, false)?.outputs),
            _ => Ok(student.clone()),
        }
    };
    match task {
        Task::Classification => Err(Error::contract("classification is not a transfer task")),
        Task::Alignment => {
            let keypoints = set
                .keypoints
                .as_ref()
                .ok_or_else(|| Error::contract("alignment needs keypoint labels"))?;
            if !net.spec().has_regression_head() || net.spec().num_keypoint_coords != keypoints.cols() {
                return Err(Error::contract("network regression head does not match the keypoints"));
            }
            run_schedule(
                net,
                stage,
                |rng| Ok(shuffled_batches(rng, n, stage.batch_size)),
                |tape, net, idx| {
                    let x = set.features.select_rows(idx)?;
                    let y = tape.constant(keypoints.select_rows(idx)?);
                    let f = net.forward(tape, &x, true)?;
                    let t = teacher_outputs(tape, &x, &f.outputs)?;
                    let l = losses::align_distill_loss(tape, &f.outputs, &t, y, &cfg)?;
                    Ok((l, f))
                },
            )
        }
        Task::Verification => {
            let count = if opts.triplets_per_epoch == 0 { n } else { opts.triplets_per_epoch };
            run_schedule(
                net,
                stage,
                |rng| {
                    let seed = rand::Rng::random::<u64>(rng);
                    let triplets = make_triplets(ds, count, seed)?;
                    Ok(triplets.chunks(stage.batch_size).map(<[Triplet]>::to_vec).collect())
                },
                |tape, net, triplets| {
                    let (samples, rows) = dedup_triplets(triplets);
                    let x = set.features.select_rows(&samples)?;
                    let y: Vec<usize> = samples.iter().map(|&i| set.labels[i]).collect();
                    let f = net.forward(tape, &x, true)?;
                    let t = teacher_outputs(tape, &x, &f.outputs)?;
                    let l = losses::verif_distill_loss(
                        tape,
                        &f.outputs,
                        &t,
                        &rows,
                        &cfg,
                        opts.include_softmax,
                        Some(&y),
                    )?;
                    Ok((l, f))
                },
            )
        }
    }
}

/// Copies the classification teacher and fine-tunes it on `task`.
pub fn train_teacher_task(
    teacher_cls: &Network,
    task: Task,
    ds: &SplitDataset,
    cfg: &DistillConfig,
    opts: &TaskOptions,
    stage: &StageConfig,
) -> Result<Trained> {
    let mut network = copy_of(teacher_cls)?;
    let losses = train_task(&mut network, None, task, ds, cfg, opts, stage)?;
    Ok(Trained { network, losses })
}

/// Fresh student trained on the task objective alone.
pub fn pretrain_student_task(
    spec: &NetworkSpec,
    task: Task,
    ds: &SplitDataset,
    cfg: &DistillConfig,
    opts: &TaskOptions,
    stage: &StageConfig,
) -> Result<Trained> {
    let mut network = fresh_network(spec, ds, stage.seed)?;
    let losses = train_task(&mut network, None, task, ds, cfg, opts, stage)?;
    Ok(Trained { network, losses })
}

/// Student distilled on `task` from `teacher_task`, starting from `init`.
pub fn distill_student_task(
    teacher_task: &Network,
    student_spec: &NetworkSpec,
    init: StudentInit<'_>,
    task: Task,
    ds: &SplitDataset,
    cfg: &DistillConfig,
    opts: &TaskOptions,
    stage: &StageConfig,
) -> Result<Trained> {
    let t = teacher_task.spec();
    if t.embedding_dim != student_spec.embedding_dim || t.num_classes != student_spec.num_classes {
        return Err(Error::contract("teacher and student outputs are not dimension-compatible"));
    }
    let mut network = match init {
        StudentInit::Scratch => fresh_network(student_spec, ds, stage.seed)?,
        StudentInit::From(src) => {
            if src.spec() != student_spec {
                return Err(Error::contract("initialization network has a different spec"));
            }
            copy_of(src)?
        }
    };
    let losses = train_task(&mut network, Some(teacher_task), task, ds, cfg, opts, stage)?;
    Ok(Trained { network, losses })
}

/// Seed of the test-split pair sample used for pair verification.
const PAIR_SEED: u64 = 0x5eed;
const EVAL_PAIRS: usize = 1000;

/// Test-split metrics of `net` for `task`.
pub fn evaluate(net: &Network, ds: &SplitDataset, task: Task) -> Result<BTreeMap<String, f64>> {
    if ds.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let x = data::feature_matrix(&ds.test)?;
    let ids = data::labels(&ds.test);
    let pred = net.predict(&x)?;
    let mut out = BTreeMap::new();
    match task {
        Task::Classification => {
            out.insert(metrics::TOP1.to_string(), metrics::top1_accuracy(&pred.logits, &ids)?);
        }
        Task::Alignment => {
            let r = pred
                .regression
                .ok_or_else(|| Error::contract("alignment evaluation needs a regression head"))?;
            let truth = data::keypoint_matrix(&ds.test)?;
            let refs = metrics::reference_distances(&truth, dataset_scale(ds)?)?;
            out.insert(metrics::NRMSE.to_string(), metrics::nrmse(&r, &truth, &refs)?);
        }
        Task::Verification => {
            out.insert(
                metrics::VERIF_TOP1.to_string(),
                metrics::verification_top1(&pred.embedding, &ids)?,
            );
            let (same, diff) = metrics::sample_pairs(&ids, EVAL_PAIRS, PAIR_SEED)?;
            out.insert(
                metrics::PAIR_ACC.to_string(),
                metrics::pair_verification_accuracy(&pred.embedding, &same, &diff)?,
            );
        }
    }
    Ok(out)
}

/// Mean distance between keypoints 0 and 1 over the training split; the
/// fallback normalizer for degenerate test samples.
pub fn dataset_scale(ds: &SplitDataset) -> Result<f64> {
    let truth = data::keypoint_matrix(&ds.train)?;
    let d = metrics::reference_distances(&truth, 0.0)?;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok(if mean < metrics::MIN_REFERENCE_DISTANCE { 1.0 } else { mean })
}
