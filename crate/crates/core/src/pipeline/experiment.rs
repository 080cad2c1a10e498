//! Experiment plans, target selection and the full run grid.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate, GeneratorParams, SplitDataset};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::metrics::{self, MetricsReport, ReportRow};
use crate::nets::{Network, NetworkSpec};

use super::stages::{
    distill_student_cls, distill_student_task, evaluate, init_student_cls, pretrain_student_task,
    train_teacher_cls, train_teacher_task, StudentInit, Task, TaskOptions, Trained, TrainingConfig,
};

/// How a student run is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InitMode {
    /// Fresh build.
    Scratch,
    /// Trained alone on the task objective first (for classification: the
    /// softmax-only student used for full initialization).
    Pretrain,
    /// Copy of the classification-distilled student.
    Distill,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Scratch => "scratch",
            InitMode::Pretrain => "pretrain",
            InitMode::Distill => "distill",
        }
    }

    pub fn parse(s: &str) -> Option<InitMode> {
        match s {
            "scratch" => Some(InitMode::Scratch),
            "pretrain" => Some(InitMode::Pretrain),
            "distill" => Some(InitMode::Distill),
            _ => None,
        }
    }
}

/// `seed ⊕ FNV-1a(name)`: an independent stream per named stage.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// The three probe configurations of target selection.
pub const PROBE_GRID: [(f64, f64); 3] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0)];

/// Keeps each target whose solo run strictly beats `(0, 0)`.
///
/// `results` must contain `(0,0)`, `(0,1)` and `(1,0)`; other entries are
/// ignored. Returns the chosen `(α, β)`.
pub fn select_targets(results: &[((f64, f64), f64)], higher_is_better: bool) -> Result<(f64, f64)> {
    let lookup = |cfg: (f64, f64)| {
        results
            .iter()
            .find(|(c, _)| *c == cfg)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::contract(format!("target selection is missing (α, β) = {cfg:?}")))
    };
    let base = lookup((0.0, 0.0))?;
    let hidden = lookup((0.0, 1.0))?;
    let soft = lookup((1.0, 0.0))?;
    let better = |m: f64| if higher_is_better { m > base } else { m < base };
    Ok((f64::from(u8::from(better(soft))), f64::from(u8::from(better(hidden)))))
}

/// Everything needed to run the full grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub generator: GeneratorParams,
    pub teacher: NetworkSpec,
    pub divisors: Vec<usize>,
    pub training: TrainingConfig,
    /// τ, λ and the classification-distillation weight α.
    pub distill: DistillConfig,
    pub ali_grid: Vec<(f64, f64)>,
    pub ver_grid: Vec<(f64, f64)>,
    /// Initializations of the alignment and verification student runs.
    pub task_inits: Vec<InitMode>,
    pub include_softmax: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads for independent runs; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let generator = GeneratorParams::default();
        let teacher = NetworkSpec {
            input_dim: generator.input_dim,
            num_classes: generator.num_identities,
            num_keypoint_coords: generator.num_keypoint_coords(),
            ..NetworkSpec::default()
        };
        Self {
            seed: 0,
            generator,
            teacher,
            divisors: vec![2, 4, 8],
            training: TrainingConfig::default(),
            distill: DistillConfig::default(),
            ali_grid: PROBE_GRID.to_vec(),
            ver_grid: PROBE_GRID.to_vec(),
            task_inits: vec![InitMode::Pretrain, InitMode::Distill],
            include_softmax: true,
            checkpoint_dir: None,
            threads: None,
        }
    }
}

impl ExperimentPlan {
    /// A few-second plan exercising every stage.
    pub fn smoke() -> Self {
        let mut plan = Self::default();
        plan.generator.num_identities = 6;
        plan.generator.samples_per_identity = 10;
        plan.generator.input_dim = 16;
        plan.teacher = NetworkSpec {
            input_dim: 16,
            hidden_widths: vec![32, 16],
            embedding_dim: 8,
            num_classes: 6,
            num_keypoint_coords: plan.generator.num_keypoint_coords(),
            width_divisor: 1,
        };
        plan.divisors = vec![2];
        plan.training.epochs_per_phase = 2;
        plan
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.teacher.validate()?;
        self.training.validate()?;
        self.distill.validate()?;
        if self.teacher.width_divisor != 1 {
            return Err(Error::Spec("the teacher spec must have width_divisor 1".into()));
        }
        if self.teacher.input_dim != self.generator.input_dim {
            return Err(Error::Spec("teacher input_dim differs from the generator's".into()));
        }
        if self.teacher.num_classes < self.generator.num_identities {
            return Err(Error::Spec("teacher has fewer classes than identities".into()));
        }
        if self.teacher.num_keypoint_coords != self.generator.num_keypoint_coords() {
            return Err(Error::Spec("teacher regression head differs from the keypoint count".into()));
        }
        for &d in &self.divisors {
            self.teacher.student(d).validate()?;
        }
        for &(a, b) in self.ali_grid.iter().chain(&self.ver_grid) {
            self.distill.with_weights(a, b).validate()?;
        }
        let mut inits = self.task_inits.clone();
        inits.sort();
        inits.dedup();
        if inits.len() != self.task_inits.len() {
            return Err(Error::Parameter("duplicate task initialization".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Parameter("threads must be positive".into()));
        }
        Ok(())
    }

    fn task_options(&self) -> TaskOptions {
        TaskOptions {
            include_softmax: self.include_softmax,
            triplets_per_epoch: self.training.triplets_per_epoch,
        }
    }
}

/// A chosen target pair for one (student, task, initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub network: String,
    pub init: String,
    pub metric: String,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub selections: Vec<Selection>,
}

pub fn network_name(divisor: Option<usize>) -> String {
    match divisor {
        None => "teacher".into(),
        Some(d) => format!("student/{d}"),
    }
}

/// Checkpoint stem of one run.
pub fn run_key(divisor: Option<usize>, stage: &str, weights: Option<(f64, f64)>) -> String {
    let net = match divisor {
        None => "teacher".to_string(),
        Some(d) => format!("student{d}"),
    };
    match weights {
        Some((a, b)) => format!("{net}-{stage}-a{a}-b{b}"),
        None => format!("{net}-{stage}"),
    }
}

struct Run {
    key: String,
    network: String,
    init: String,
    weights: (f64, f64),
    task: Task,
    trained: Trained,
}

struct Context<'a> {
    plan: &'a ExperimentPlan,
    ds: &'a SplitDataset,
}

impl Context<'_> {
    fn seed(&self, key: &str) -> u64 {
        derive_seed(self.plan.seed, key)
    }

    fn cfg(&self, (a, b): (f64, f64)) -> DistillConfig {
        self.plan.distill.with_weights(a, b)
    }

    fn finish(&self, key: String, task: Task, network: String, init: String, weights: (f64, f64), r: Result<Trained>) -> Result<Run> {
        let trained = r.map_err(|e| e.in_stage(&key))?;
        if let Some(dir) = &self.plan.checkpoint_dir {
            trained
                .network
                .save(dir.join(format!("{key}.ckpt")))
                .map_err(|e| e.in_stage(&key))?;
        }
        Ok(Run {
            key,
            network,
            init,
            weights,
            task,
            trained,
        })
    }
}

enum Job<'a> {
    TeacherTask(Task),
    StudentBase(usize),
    ClsScratch(usize),
    TaskPretrain(usize, Task),
    ClsFull(usize, &'a Network),
    TaskStudent {
        divisor: usize,
        task: Task,
        mode: InitMode,
        weights: (f64, f64),
        teacher: &'a Network,
        source: Option<&'a Network>,
    },
}

fn run_job(ctx: &Context<'_>, teacher_cls: &Network, job: &Job<'_>) -> Result<Run> {
    let plan = ctx.plan;
    let tr = &plan.training;
    let opts = plan.task_options();
    let cls_w = (plan.distill.alpha, 0.0);
    match *job {
        Job::TeacherTask(task) => {
            let key = run_key(None, task.short_name(), None);
            let stage = tr.stage(task, true, ctx.seed(&key));
            let r = train_teacher_task(teacher_cls, task, ctx.ds, &plan.distill, &opts, &stage);
            ctx.finish(key, task, network_name(None), task.short_name().into(), (0.0, 0.0), r)
        }
        Job::StudentBase(d) => {
            let key = run_key(Some(d), "cls-pretrain", None);
            let stage = tr.stage(Task::Classification, false, ctx.seed(&key));
            let r = init_student_cls(&plan.teacher.student(d), ctx.ds, &stage);
            ctx.finish(key, Task::Classification, network_name(Some(d)), "cls:pretrain".into(), (0.0, 0.0), r)
        }
        Job::ClsScratch(d) => {
            let key = run_key(Some(d), "cls-scratch", Some(cls_w));
            let stage = tr.stage(Task::Classification, false, ctx.seed(&key));
            let r = distill_student_cls(
                teacher_cls,
                &plan.teacher.student(d),
                StudentInit::Scratch,
                ctx.ds,
                &ctx.cfg(cls_w),
                &stage,
            );
            ctx.finish(key, Task::Classification, network_name(Some(d)), "cls:scratch".into(), cls_w, r)
        }
        Job::ClsFull(d, base) => {
            let key = run_key(Some(d), "cls-distill", Some(cls_w));
            let stage = tr.stage(Task::Classification, true, ctx.seed(&key));
            let r = distill_student_cls(
                teacher_cls,
                &plan.teacher.student(d),
                StudentInit::From(base),
                ctx.ds,
                &ctx.cfg(cls_w),
                &stage,
            );
            ctx.finish(key, Task::Classification, network_name(Some(d)), "cls:distill".into(), cls_w, r)
        }
        Job::TaskPretrain(d, task) => {
            let key = run_key(Some(d), &format!("{}-base", task.short_name()), None);
            let stage = tr.stage(task, false, ctx.seed(&key));
            let r = pretrain_student_task(&plan.teacher.student(d), task, ctx.ds, &plan.distill, &opts, &stage);
            ctx.finish(key, task, network_name(Some(d)), format!("{}:base", task.short_name()), (0.0, 0.0), r)
        }
        Job::TaskStudent {
            divisor,
            task,
            mode,
            weights,
            teacher,
            source,
        } => {
            let label = format!("{}-{}", task.short_name(), mode.name());
            let key = run_key(Some(divisor), &label, Some(weights));
            let init = match source {
                Some(src) => StudentInit::From(src),
                None => StudentInit::Scratch,
            };
            let stage = tr.stage(task, source.is_some(), ctx.seed(&key));
            let r = distill_student_task(
                teacher,
                &plan.teacher.student(divisor),
                init,
                task,
                ctx.ds,
                &ctx.cfg(weights),
                &opts,
                &stage,
            );
            ctx.finish(
                key,
                task,
                network_name(Some(divisor)),
                format!("{}:{}", task.short_name(), mode.name()),
                weights,
                r,
            )
        }
    }
}

fn run_all<'a>(ctx: &Context<'_>, teacher_cls: &Network, jobs: &[Job<'a>]) -> Result<Vec<Run>> {
    jobs.par_iter().map(|j| run_job(ctx, teacher_cls, j)).collect()
}

/// Trains and evaluates every run of `plan`.
///
/// Stages run in dependency order; independent runs of one stage level may
/// run in parallel. Results do not depend on scheduling.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let ds = generate(&plan.generator).map_err(|e| e.in_stage("generate"))?;
    if let Some(dir) = &plan.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    match plan.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(e.to_string()))?
            .install(|| run_grid(plan, &ds)),
        None => run_grid(plan, &ds),
    }
}

/// Runs the grid on an existing dataset.
pub fn run_grid(plan: &ExperimentPlan, ds: &SplitDataset) -> Result<ExperimentOutcome> {
    let ctx = Context { plan, ds };
    let tasks = [Task::Alignment, Task::Verification];

    let key = run_key(None, "cls", None);
    let stage = plan.training.stage(Task::Classification, false, ctx.seed(&key));
    let teacher = ctx.finish(
        key,
        Task::Classification,
        network_name(None),
        "cls".into(),
        (0.0, 0.0),
        train_teacher_cls(&plan.teacher, ds, &stage),
    )?;
    let teacher_cls = &teacher.trained.network;

    let mut level1: Vec<Job> = tasks.iter().map(|&t| Job::TeacherTask(t)).collect();
    for &d in &plan.divisors {
        level1.push(Job::StudentBase(d));
        level1.push(Job::ClsScratch(d));
        if plan.task_inits.contains(&InitMode::Pretrain) {
            level1.extend(tasks.iter().map(|&t| Job::TaskPretrain(d, t)));
        }
    }
    let runs1 = run_all(&ctx, teacher_cls, &level1)?;
    let find = |runs: &'_ [Run], key: &str| -> usize {
        runs.iter().position(|r| r.key == key).expect("run scheduled")
    };

    let level2: Vec<Job> = plan
        .divisors
        .iter()
        .map(|&d| Job::ClsFull(d, &runs1[find(&runs1, &run_key(Some(d), "cls-pretrain", None))].trained.network))
        .collect();
    let runs2 = run_all(&ctx, teacher_cls, &level2)?;

    let mut level3 = Vec::new();
    for &d in &plan.divisors {
        for task in tasks {
            let teacher = &runs1[find(&runs1, &run_key(None, task.short_name(), None))].trained.network;
            let grid = match task {
                Task::Alignment => &plan.ali_grid,
                _ => &plan.ver_grid,
            };
            for &mode in &plan.task_inits {
                let source = match mode {
                    InitMode::Scratch => None,
                    InitMode::Pretrain => {
                        let key = run_key(Some(d), &format!("{}-base", task.short_name()), None);
                        Some(&runs1[find(&runs1, &key)].trained.network)
                    }
                    InitMode::Distill => {
                        let key = run_key(Some(d), "cls-distill", Some((plan.distill.alpha, 0.0)));
                        Some(&runs2[find(&runs2, &key)].trained.network)
                    }
                };
                for &weights in grid {
                    level3.push(Job::TaskStudent {
                        divisor: d,
                        task,
                        mode,
                        weights,
                        teacher,
                        source,
                    });
                }
            }
        }
    }
    let runs3 = run_all(&ctx, teacher_cls, &level3)?;

    let all: Vec<&Run> = std::iter::once(&teacher).chain(&runs1).chain(&runs2).chain(&runs3).collect();
    let rows: Vec<ReportRow> = all
        .par_iter()
        .map(|run| {
            let metrics = evaluate(&run.trained.network, ds, run.task).map_err(|e| e.in_stage(&run.key))?;
            Ok(ReportRow {
                network: run.network.clone(),
                init: run.init.clone(),
                alpha: run.weights.0,
                beta: run.weights.1,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let mut report = MetricsReport::new();
    for row in rows {
        report.push(row)?;
    }
    let selections = select_all(&report);
    Ok(ExperimentOutcome { report, selections })
}

/// Target selection for every student task cell that ran the probe grid.
fn select_all(report: &MetricsReport) -> Vec<Selection> {
    let mut cells: BTreeMap<(String, String), Vec<((f64, f64), &BTreeMap<String, f64>)>> = BTreeMap::new();
    for row in report.rows().iter().filter(|r| r.network != "teacher") {
        if row.init.starts_with("ali:") || row.init.starts_with("ver:") {
            cells
                .entry((row.network.clone(), row.init.clone()))
                .or_default()
                .push(((row.alpha, row.beta), &row.metrics));
        }
    }
    let mut out = Vec::new();
    for ((network, init), entries) in cells {
        let (metric, higher) = if init.starts_with("ali:") {
            (metrics::NRMSE, false)
        } else {
            (metrics::VERIF_TOP1, true)
        };
        let values: Vec<((f64, f64), f64)> =
            entries.iter().filter_map(|(w, m)| m.get(metric).map(|v| (*w, *v))).collect();
        if let Ok((alpha, beta)) = select_targets(&values, higher) {
            out.push(Selection {
                network,
                init,
                metric: metric.to_string(),
                alpha,
                beta,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(base: f64, hidden: f64, soft: f64) -> Vec<((f64, f64), f64)> {
        vec![((0.0, 0.0), base), ((0.0, 1.0), hidden), ((1.0, 0.0), soft)]
    }

    #[test]
    fn select_targets_on_published_rows() {
        assert_eq!(select_targets(&cells(3.29, 3.21, 3.54), false).unwrap(), (0.0, 1.0));
        assert_eq!(select_targets(&cells(79.51, 77.63, 79.96), true).unwrap(), (1.0, 0.0));
        assert_eq!(select_targets(&cells(1.0, 1.0, 1.0), true).unwrap(), (0.0, 0.0));
        assert_eq!(select_targets(&cells(1.0, 2.0, 3.0), true).unwrap(), (1.0, 1.0));
        assert!(select_targets(&cells(1.0, 2.0, 3.0)[..2], true).is_err());
    }

    #[test]
    fn seeds_differ_per_stage() {
        assert_ne!(derive_seed(7, "teacher-cls"), derive_seed(7, "teacher-ali"));
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
        assert_eq!(derive_seed(0, ""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn run_keys() {
        assert_eq!(run_key(None, "cls", None), "teacher-cls");
        assert_eq!(run_key(Some(8), "ali-distill", Some((0.0, 1.0))), "student8-ali-distill-a0-b1");
    }

    #[test]
    fn teacher_only_plan() {
        let mut plan = ExperimentPlan::smoke();
        plan.divisors.clear();
        plan.training.epochs_per_phase = 1;
        let out = run_experiment(&plan).unwrap();
        let names: Vec<&str> = out.report.rows().iter().map(|r| r.init.as_str()).collect();
        assert_eq!(names, vec!["cls", "ali", "ver"]);
        assert!(out.report.rows().iter().all(|r| r.network == "teacher"));
        assert!(out.selections.is_empty());
    }

    #[test]
    fn smoke_plan_covers_grid() {
        let mut plan = ExperimentPlan::smoke();
        plan.training.epochs_per_phase = 1;
        plan.task_inits = vec![InitMode::Scratch, InitMode::Pretrain, InitMode::Distill];
        let out = run_experiment(&plan).unwrap();
        let rows = out.report.rows();
        // 3 teacher rows, 3 cls rows, 2 task pretrain rows, 2 tasks × 3 inits × 3 configs
        assert_eq!(rows.len(), 3 + 3 + 2 + 18);
        for init in ["ali:scratch", "ali:pretrain", "ali:distill", "ver:scratch", "ver:pretrain", "ver:distill"] {
            for (a, b) in PROBE_GRID {
                assert!(out.report.get("student/2", init, a, b).is_some(), "{init} {a} {b}");
            }
        }
        assert_eq!(out.selections.len(), 6);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut plan = ExperimentPlan::smoke();
        plan.teacher.input_dim += 1;
        assert!(run_experiment(&plan).is_err());
        let mut plan = ExperimentPlan::smoke();
        plan.divisors = vec![0];
        assert!(plan.validate().is_err());
    }
}
