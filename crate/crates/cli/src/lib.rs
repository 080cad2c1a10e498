//! Command-line front end: dataset generation, single-stage training,
//! evaluation and full experiment reproduction.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use distillforge::data::{generate, SplitDataset};
use distillforge::losses::DistillConfig;
use distillforge::metrics::{MetricsReport, ReportRow};
use distillforge::nets::Network;
use distillforge::pipeline::{
    derive_seed, distill_student_cls, distill_student_task, evaluate, init_student_cls,
    pretrain_student_task, run_experiment, run_key, train_teacher_cls, train_teacher_task, ExperimentOutcome,
    ExperimentPlan, InitMode, StudentInit, Task, TaskOptions, Trained,
};
use distillforge::{Error, Result};

pub use config::RunConfig;

pub const THREADS_ENV: &str = "DISTILLFORGE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "distillforge", version, about = "Distill compact networks from a teacher on synthetic face-like data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Top-level seed, applied after every other source.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic dataset to `<out>/dataset.txt`.
    Generate(CommonArgs),
    /// Runs one training stage and writes its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluates a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Runs a whole experiment plan and writes the reports.
    Reproduce(ReproduceArgs),
    /// Prints the resolved configuration.
    Config(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageName {
    TeacherCls,
    TeacherAli,
    TeacherVer,
    StudentCls,
    StudentAli,
    StudentVer,
    DistillCls,
    DistillAli,
    DistillVer,
}

impl StageName {
    pub fn task(self) -> Task {
        use StageName::*;
        match self {
            TeacherCls | StudentCls | DistillCls => Task::Classification,
            TeacherAli | StudentAli | DistillAli => Task::Alignment,
            TeacherVer | StudentVer | DistillVer => Task::Verification,
        }
    }

    fn is_teacher(self) -> bool {
        matches!(self, StageName::TeacherCls | StageName::TeacherAli | StageName::TeacherVer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Cls,
    Ali,
    Ver,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Cls => Task::Classification,
            TaskArg::Ali => Task::Alignment,
            TaskArg::Ver => Task::Verification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Pretrain,
    Distill,
}

impl From<InitArg> for InitMode {
    fn from(m: InitArg) -> InitMode {
        match m {
            InitArg::Pretrain => InitMode::Pretrain,
            InitArg::Distill => InitMode::Distill,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlanArg {
    Default,
    Smoke,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageName,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Teacher checkpoint: the classification teacher for `teacher-ali`,
    /// `teacher-ver` and `distill-cls`, the task teacher for `distill-ali`
    /// and `distill-ver`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint to start from; a fresh student when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Where `--init` came from: a task-pretrained student (`pretrain`) or a
    /// distilled classification student (`distill`). Names the run and its
    /// seed stream.
    #[arg(long, value_enum, default_value = "distill")]
    init_mode: InitArg,
    /// Student width divisor.
    #[arg(long, default_value_t = 2)]
    divisor: usize,
    /// Checkpoint and metrics file stem; defaults to the run key.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "cls")]
    task: TaskArg,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    #[arg(long, value_enum, default_value = "default")]
    plan: PlanArg,
    #[command(flatten)]
    common: Common,
}

/// Failure of one command, carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure { code, error }
    }
}

fn usage(error: Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a.common),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
        Command::Config(a) => {
            print!("{}", resolve(ExperimentPlan::default(), &a.common)?.to_text());
            Ok(())
        }
    }
}

fn resolve(base: ExperimentPlan, common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let mut cfg = RunConfig::resolve(base, common.config.as_deref(), &overrides).map_err(usage)?;
    cfg.plan.threads = threads_from_env()?;
    Ok(cfg)
}

fn threads_from_env() -> std::result::Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(Error::Config {
                key: THREADS_ENV.into(),
                line: None,
                msg: format!("expected a positive integer, got `{v}`"),
            })),
        },
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_or_generate(path: Option<&Path>, cfg: &RunConfig) -> Result<SplitDataset> {
    match path {
        Some(p) => SplitDataset::load(p).map_err(|e| e.in_stage(&format!("load {}", p.display()))),
        None => generate(&cfg.plan.generator).map_err(|e| e.in_stage("generate")),
    }
}

fn load_network(path: &Path) -> Result<Network> {
    Network::load(path).map_err(|e| e.in_stage(&format!("load {}", path.display())))
}

/// Writes the dataset described by `cfg` into `out` and returns its path.
pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let ds = generate(&cfg.plan.generator).map_err(|e| e.in_stage("generate"))?;
    create_out(out)?;
    let path = out.join("dataset.txt");
    ds.save(&path)?;
    Ok(path)
}

/// Stem used for the checkpoint and metrics files of a `train` run; equal to
/// the key of the matching run in a full experiment.
pub fn stage_key(stage: StageName, divisor: usize, weights: (f64, f64), init: Option<InitMode>) -> String {
    use StageName::*;
    let d = Some(divisor);
    match stage {
        TeacherCls | TeacherAli | TeacherVer => run_key(None, stage.task().short_name(), None),
        StudentCls => run_key(d, "cls-pretrain", None),
        StudentAli | StudentVer => run_key(d, &format!("{}-base", stage.task().short_name()), None),
        DistillCls => {
            let label = if init.is_some() { "cls-distill" } else { "cls-scratch" };
            run_key(d, label, Some((weights.0, 0.0)))
        }
        DistillAli | DistillVer => {
            let mode = init.unwrap_or(InitMode::Scratch).name();
            run_key(d, &format!("{}-{mode}", stage.task().short_name()), Some(weights))
        }
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str, stage: StageName) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config {
        key: flag.into(),
        line: None,
        msg: format!("required by stage {:?}", stage),
    })
}

/// Runs one named stage on `ds`.
pub fn train_stage(
    cfg: &RunConfig,
    ds: &SplitDataset,
    stage: StageName,
    divisor: usize,
    teacher: Option<&Network>,
    init: Option<(&Network, InitMode)>,
) -> Result<(String, Trained)> {
    use StageName::*;
    let plan = &cfg.plan;
    let key = stage_key(stage, divisor, cfg.weights, init.map(|(_, m)| m));
    let init = init.map(|(n, _)| n);
    let task = stage.task();
    let initialized = init.is_some() || matches!(stage, TeacherAli | TeacherVer);
    let sc = plan.training.stage(task, initialized, derive_seed(plan.seed, &key));
    let opts = TaskOptions {
        include_softmax: plan.include_softmax,
        triplets_per_epoch: plan.training.triplets_per_epoch,
    };
    let distill: DistillConfig = plan.distill.with_weights(cfg.weights.0, cfg.weights.1);
    let student = plan.teacher.student(divisor);
    let need_teacher = || teacher.ok_or_else(|| Error::Parameter(format!("stage {stage:?} needs a teacher checkpoint")));
    let from = match init {
        Some(n) => StudentInit::From(n),
        None => StudentInit::Scratch,
    };
    if init.is_some() && !matches!(stage, DistillCls | DistillAli | DistillVer) {
        return Err(Error::Parameter(format!("stage {stage:?} does not take an initialization")));
    }
    let trained = match stage {
        TeacherCls => train_teacher_cls(&plan.teacher, ds, &sc),
        TeacherAli | TeacherVer => train_teacher_task(need_teacher()?, task, ds, &distill, &opts, &sc),
        StudentCls => init_student_cls(&student, ds, &sc),
        StudentAli | StudentVer => pretrain_student_task(&student, task, ds, &distill, &opts, &sc),
        DistillCls => {
            let cls = plan.distill.with_weights(cfg.weights.0, 0.0);
            distill_student_cls(need_teacher()?, &student, from, ds, &cls, &sc)
        }
        DistillAli | DistillVer => distill_student_task(need_teacher()?, &student, from, task, ds, &distill, &opts, &sc),
    }
    .map_err(|e| e.in_stage(&key))?;
    Ok((key, trained))
}

fn metrics_json(m: &BTreeMap<String, f64>) -> String {
    serde_json::to_string_pretty(m).expect("metric maps serialize")
}

fn print_metrics(m: &BTreeMap<String, f64>) {
    for (k, v) in m {
        println!("{k}\t{v}");
    }
}

fn cmd_generate(common: &Common) -> std::result::Result<(), Failure> {
    let cfg = resolve(ExperimentPlan::default(), common)?;
    let path = generate_dataset(&cfg, &common.out)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve(ExperimentPlan::default(), &a.common)?;
    let ds = load_or_generate(a.dataset.as_deref(), &cfg)?;
    let teacher_path = match a.stage {
        StageName::TeacherCls | StageName::StudentCls | StageName::StudentAli | StageName::StudentVer => None,
        s => Some(require(&a.teacher, "--teacher", s).map_err(usage)?),
    };
    let teacher = teacher_path.map(load_network).transpose()?;
    let init = a.init.as_deref().map(load_network).transpose()?;
    if a.divisor == 0 && !a.stage.is_teacher() {
        return Err(usage(Error::Config {
            key: "--divisor".into(),
            line: None,
            msg: "must be positive".into(),
        }));
    }
    let init = init.as_ref().map(|n| (n, InitMode::from(a.init_mode)));
    let (key, trained) = train_stage(&cfg, &ds, a.stage, a.divisor.max(1), teacher.as_ref(), init)?;
    let metrics = evaluate(&trained.network, &ds, a.stage.task()).map_err(|e| e.in_stage(&key))?;
    let stem = a.name.clone().unwrap_or(key);
    create_out(&a.common.out)?;
    trained.network.save(a.common.out.join(format!("{stem}.ckpt")))?;
    fs::write(a.common.out.join(format!("{stem}.metrics.json")), metrics_json(&metrics)).map_err(Error::from)?;
    println!("checkpoint\t{}", a.common.out.join(format!("{stem}.ckpt")).display());
    print_metrics(&metrics);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve(ExperimentPlan::default(), &a.common)?;
    let ds = load_or_generate(a.dataset.as_deref(), &cfg)?;
    let net = load_network(&a.checkpoint)?;
    let metrics = evaluate(&net, &ds, a.task.into())?;
    println!("{}", metrics_json(&metrics));
    Ok(())
}

/// Human-readable report: metrics table plus target selections.
pub fn render_report(outcome: &ExperimentOutcome) -> String {
    let mut s = outcome.report.to_table();
    if !outcome.selections.is_empty() {
        s.push_str("\nselected targets\n");
        for sel in &outcome.selections {
            s.push_str(&format!(
                "{}\t{}\t{}\talpha={}\tbeta={}\n",
                sel.network, sel.init, sel.metric, sel.alpha, sel.beta
            ));
        }
    }
    s
}

/// Machine-readable report.
pub fn report_json(outcome: &ExperimentOutcome) -> String {
    serde_json::to_string_pretty(outcome).expect("outcomes serialize")
}

/// Reads the metric rows back from a human-readable report.
pub fn parse_table(text: &str) -> Result<MetricsReport> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty table".into() })?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    let mut report = MetricsReport::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            break;
        }
        if line.starts_with('-') {
            continue;
        }
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != cols.len() || cols.len() < 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} columns, found {}", cols.len(), cells.len()),
            });
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("not a number: `{s}`"),
            })
        };
        let mut metrics = BTreeMap::new();
        for (c, v) in cols[4..].iter().zip(&cells[4..]) {
            if *v == "-" {
                continue;
            }
            let name = c.trim_end_matches("(%)");
            metrics.insert(name.to_string(), num(v)? / 100.0);
        }
        report.push(ReportRow {
            network: cells[0].into(),
            init: cells[1].into(),
            alpha: num(cells[2])?,
            beta: num(cells[3])?,
            metrics,
        })?;
    }
    Ok(report)
}

/// Runs `cfg.plan` with checkpoints under `out/checkpoints` and writes
/// `report.txt`, `report.json` and `config.txt`.
pub fn reproduce(cfg: &RunConfig, out: &Path) -> Result<ExperimentOutcome> {
    create_out(out)?;
    let mut plan = cfg.plan.clone();
    plan.checkpoint_dir = Some(out.join("checkpoints"));
    let outcome = run_experiment(&plan)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    fs::write(out.join("report.txt"), render_report(&outcome))?;
    fs::write(out.join("report.json"), report_json(&outcome))?;
    Ok(outcome)
}

fn cmd_reproduce(a: &ReproduceArgs) -> std::result::Result<(), Failure> {
    let base = match a.plan {
        PlanArg::Default => ExperimentPlan::default(),
        PlanArg::Smoke => ExperimentPlan::smoke(),
    };
    let cfg = resolve(base, &a.common)?;
    let outcome = reproduce(&cfg, &a.common.out)?;
    print!("{}", render_report(&outcome));
    Ok(())
}

