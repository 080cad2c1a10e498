//! Flat `section.key = value` run configuration.

use std::path::Path;

use distillforge::pipeline::{derive_seed, ExperimentPlan, InitMode};
use distillforge::{Error, Result};

/// Every accepted key with its description.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "top-level seed; every stage derives its own stream from it"),
    ("generator.num_identities", "number of identities (also the class count)"),
    ("generator.samples_per_identity", "samples drawn per identity before the 80/20 split"),
    ("generator.input_dim", "feature dimension"),
    ("generator.latent_dim", "identity latent dimension"),
    ("generator.pose_dim", "pose dimension"),
    ("generator.num_keypoints", "keypoints per sample"),
    ("generator.identity_keypoint_scale", "identity influence on keypoints"),
    ("generator.pose_keypoint_scale", "pose influence on keypoints"),
    ("generator.noise_std", "feature and keypoint noise"),
    ("network.hidden_widths", "teacher hidden widths, comma separated"),
    ("network.embedding_dim", "width of the shared embedding layer"),
    ("students.divisors", "student width divisors, comma separated (may be empty)"),
    ("train.epochs_per_phase", "epochs per learning-rate phase"),
    ("train.scratch_rate", "first-phase rate for fresh networks"),
    ("train.continuation_rate", "rate for initialized networks and the second phase"),
    ("train.momentum", "Nesterov momentum"),
    ("train.grad_clip", "global gradient-norm ceiling, 0 disables"),
    ("train.cls_batch", "classification batch size"),
    ("train.ali_batch", "alignment batch size"),
    ("train.ver_batch", "verification batch size in triplets"),
    ("train.triplets_per_epoch", "triplets per verification epoch, 0 = one per sample"),
    ("distill.alpha", "soft-prediction weight"),
    ("distill.beta", "hidden-layer weight (single-stage training only)"),
    ("distill.tau", "softmax temperature"),
    ("distill.lambda", "triplet margin"),
    ("grid.ali", "alignment (alpha:beta) list, e.g. 0:0,0:1,1:0"),
    ("grid.ver", "verification (alpha:beta) list"),
    ("grid.inits", "task student initializations: scratch, pretrain, distill"),
    ("verification.include_softmax", "add the identity softmax loss to the triplet objective"),
];

/// Resolved configuration: the experiment plan plus single-stage weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub plan: ExperimentPlan,
    /// `(alpha, beta)` used by single-stage `train`.
    pub weights: (f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_plan(ExperimentPlan::default())
    }
}

fn bad(key: &str, line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as {}", std::any::type_name::<T>()))
}

fn positive(value: &str) -> std::result::Result<usize, String> {
    match parse::<usize>(value)? {
        0 => Err("must be positive".into()),
        v => Ok(v),
    }
}

fn real(value: &str, ok: impl Fn(f64) -> bool, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse(value)?;
    if v.is_finite() && ok(v) {
        Ok(v)
    } else {
        Err(format!("{v} is out of range: must be {what}"))
    }
}

fn list<T>(value: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

fn weight_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected alpha:beta, got `{s}`"))?;
    let w = |v: &str| real(v.trim(), |x| x >= 0.0, "nonnegative");
    Ok((w(a)?, w(b)?))
}

fn fmt_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_plan(plan: ExperimentPlan) -> Self {
        let weights = (plan.distill.alpha, plan.distill.beta);
        let mut cfg = Self { plan, weights };
        cfg.sync();
        cfg
    }

    /// Keeps derived fields (teacher dimensions, generator seed) consistent.
    fn sync(&mut self) {
        let plan = &mut self.plan;
        plan.teacher.input_dim = plan.generator.input_dim;
        plan.teacher.num_classes = plan.generator.num_identities;
        plan.teacher.num_keypoint_coords = plan.generator.num_keypoint_coords();
        plan.generator.seed = derive_seed(plan.seed, "generator");
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        self.apply(key, value.trim()).map_err(|msg| bad(key, line, msg))?;
        self.sync();
        Ok(())
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.plan;
        let g = &mut p.generator;
        let t = &mut p.training;
        match key {
            "run.seed" => p.seed = parse(v)?,
            "generator.num_identities" => g.num_identities = positive(v)?,
            "generator.samples_per_identity" => {
                g.samples_per_identity = match positive(v)? {
                    1 => return Err("must be at least 2 so both splits are populated".into()),
                    n => n,
                }
            }
            "generator.input_dim" => g.input_dim = positive(v)?,
            "generator.latent_dim" => g.latent_dim = positive(v)?,
            "generator.pose_dim" => g.pose_dim = positive(v)?,
            "generator.num_keypoints" => {
                g.num_keypoints = match positive(v)? {
                    1 => return Err("must be at least 2".into()),
                    n => n,
                }
            }
            "generator.identity_keypoint_scale" => g.identity_keypoint_scale = real(v, |x| x >= 0.0, "nonnegative")?,
            "generator.pose_keypoint_scale" => g.pose_keypoint_scale = real(v, |x| x > 0.0, "positive")?,
            "generator.noise_std" => g.noise_std = real(v, |x| x >= 0.0, "nonnegative")?,
            "network.hidden_widths" => {
                let widths = list(v, positive)?;
                if widths.is_empty() {
                    return Err("needs at least one hidden layer".into());
                }
                p.teacher.hidden_widths = widths;
            }
            "network.embedding_dim" => p.teacher.embedding_dim = positive(v)?,
            "students.divisors" => p.divisors = list(v, positive)?,
            "train.epochs_per_phase" => t.epochs_per_phase = parse(v)?,
            "train.scratch_rate" => t.scratch_rate = real(v, |x| x > 0.0, "positive")?,
            "train.continuation_rate" => t.continuation_rate = real(v, |x| x > 0.0, "positive")?,
            "train.momentum" => t.momentum = real(v, |x| (0.0..1.0).contains(&x), "in [0, 1)")?,
            "train.grad_clip" => t.grad_clip = real(v, |x| x >= 0.0, "nonnegative")?,
            "train.cls_batch" => t.cls_batch = positive(v)?,
            "train.ali_batch" => t.ali_batch = positive(v)?,
            "train.ver_batch" => t.ver_batch = positive(v)?,
            "train.triplets_per_epoch" => t.triplets_per_epoch = parse(v)?,
            "distill.alpha" => {
                p.distill.alpha = real(v, |x| x >= 0.0, "nonnegative")?;
                self.weights.0 = p.distill.alpha;
            }
            "distill.beta" => {
                p.distill.beta = real(v, |x| x >= 0.0, "nonnegative")?;
                self.weights.1 = p.distill.beta;
            }
            "distill.tau" => p.distill.tau = real(v, |x| x >= 1.0, "at least 1")?,
            "distill.lambda" => p.distill.lambda_margin = real(v, |x| x >= 0.0, "nonnegative")?,
            "grid.ali" => p.ali_grid = list(v, weight_pair)?,
            "grid.ver" => p.ver_grid = list(v, weight_pair)?,
            "grid.inits" => {
                let inits = list(v, |s| InitMode::parse(s).ok_or_else(|| format!("unknown initialization `{s}`")))?;
                let mut seen = inits.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != inits.len() {
                    return Err("initializations must not repeat".into());
                }
                p.task_inits = inits;
            }
            "verification.include_softmax" => p.include_softmax = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(content, Some(line), "expected `key = value`"))?;
            let key = key.trim();
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(bad(key, Some(line), format!("already set on line {first}")));
            }
            self.set(key, value, Some(line))?;
        }
        Ok(())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| bad(assignment, None, "expected key=value"))?;
        self.set(key.trim(), value, None)
    }

    /// Cross-key checks once every source has been applied.
    pub fn finish(self) -> Result<Self> {
        let g = &self.plan.generator;
        if g.pose_keypoint_scale <= g.identity_keypoint_scale {
            return Err(bad(
                "generator.pose_keypoint_scale",
                None,
                "must exceed generator.identity_keypoint_scale",
            ));
        }
        for &d in &self.plan.divisors {
            if let Err(e) = self.plan.teacher.student(d).validate() {
                return Err(bad("students.divisors", None, e.to_string()));
            }
        }
        self.plan.validate().map_err(|e| bad("config", None, e.to_string()))?;
        Ok(self)
    }

    /// Defaults, then the optional file, then the overrides.
    pub fn resolve(base: ExperimentPlan, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::from_plan(base);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.finish()
    }

    /// Current value of every key, as accepted by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let p = &self.plan;
        let g = &p.generator;
        let t = &p.training;
        let pairs = |grid: &[(f64, f64)]| grid.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(",");
        let inits: Vec<&str> = p.task_inits.iter().map(|m| m.name()).collect();
        let values = [
            p.seed.to_string(),
            g.num_identities.to_string(),
            g.samples_per_identity.to_string(),
            g.input_dim.to_string(),
            g.latent_dim.to_string(),
            g.pose_dim.to_string(),
            g.num_keypoints.to_string(),
            g.identity_keypoint_scale.to_string(),
            g.pose_keypoint_scale.to_string(),
            g.noise_std.to_string(),
            fmt_list(&p.teacher.hidden_widths),
            p.teacher.embedding_dim.to_string(),
            fmt_list(&p.divisors),
            t.epochs_per_phase.to_string(),
            t.scratch_rate.to_string(),
            t.continuation_rate.to_string(),
            t.momentum.to_string(),
            t.grad_clip.to_string(),
            t.cls_batch.to_string(),
            t.ali_batch.to_string(),
            t.ver_batch.to_string(),
            t.triplets_per_epoch.to_string(),
            self.weights.0.to_string(),
            self.weights.1.to_string(),
            p.distill.tau.to_string(),
            p.distill.lambda_margin.to_string(),
            pairs(&p.ali_grid),
            pairs(&p.ver_grid),
            inits.join(","),
            p.include_softmax.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, doc), v)| format!("# {doc}\n{k} = {v}\n"))
            .collect()
    }
}
