//! Shared test fixtures: the loss gradient suite, reduction identities and
//! brute-force metric references.

#![allow(dead_code)]

use distillforge::gradcheck::grad_check;
use distillforge::losses::{
    align_distill_loss, cross_entropy, distill_cls_loss, distill_cls_loss_with, euclidean_loss, general_distill_loss,
    hidden_match_loss, soft_predictions, soft_target_loss, softmax_loss, triplet_loss, verif_distill_loss, ClsTarget,
    DistillConfig, TripletRows,
};
use distillforge::nets::Outputs;
use distillforge::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Triplets closer than this to the hinge are resampled.
pub const KINK_GAP: f64 = 1e-3;

const BATCH: usize = 6;
const FEATURES: usize = 4;
const CLASSES: usize = 5;
const EMBED: usize = 3;
const COORDS: usize = 4;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn prob_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols], 0.05, 1.0);
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn cfg(alpha: f64, beta: f64) -> DistillConfig {
    DistillConfig {
        alpha,
        beta,
        tau: 3.0,
        lambda_margin: 0.4,
    }
}

/// Linear heads mapping a feature batch to network-shaped outputs.
#[derive(Clone)]
struct Heads {
    logits: Tensor,
    embedding: Tensor,
    regression: Tensor,
}

impl Heads {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Heads {
            logits: uniform(rng, &[FEATURES, CLASSES], -1.0, 1.0),
            embedding: uniform(rng, &[FEATURES, EMBED], -1.0, 1.0),
            regression: uniform(rng, &[FEATURES, COORDS], -1.0, 1.0),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Outputs> {
        let wl = tape.constant(self.logits.clone());
        let we = tape.constant(self.embedding.clone());
        let wr = tape.constant(self.regression.clone());
        Ok(Outputs {
            logits: tape.matmul(x, wl)?,
            embedding: tape.matmul(x, we)?,
            regression: Some(tape.matmul(x, wr)?),
        })
    }
}

fn teacher_outputs(tape: &mut Tape, t: &TeacherValues) -> Outputs {
    Outputs {
        logits: tape.constant(t.logits.clone()),
        embedding: tape.constant(t.embedding.clone()),
        regression: None,
    }
}

#[derive(Clone)]
struct TeacherValues {
    logits: Tensor,
    embedding: Tensor,
}

impl TeacherValues {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        TeacherValues {
            logits: uniform(rng, &[BATCH, CLASSES], -3.0, 3.0),
            embedding: uniform(rng, &[BATCH, EMBED], -2.0, 2.0),
        }
    }
}

fn random_triplets(rng: &mut ChaCha8Rng, n: usize, count: usize) -> TripletRows {
    let mut rows = TripletRows::default();
    for _ in 0..count {
        rows.anchor.push(rng.random_range(0..n));
        rows.positive.push(rng.random_range(0..n));
        rows.negative.push(rng.random_range(0..n));
    }
    rows
}

/// Smallest distance of any triplet's hinge argument from zero.
pub fn hinge_clearance(emb: &Tensor, rows: &TripletRows, margin: f64) -> f64 {
    let d = |i: usize, j: usize| -> f64 { emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
    (0..rows.len())
        .map(|t| (d(rows.anchor[t], rows.positive[t]) - d(rows.anchor[t], rows.negative[t]) + margin).abs())
        .fold(f64::INFINITY, f64::min)
}

/// One loss gradient check: the input point and the scalar function of it.
struct Point {
    x: Tensor,
    f: Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
}

type Sampler = fn(&mut ChaCha8Rng) -> Point;

fn sample_soft_predictions(rng: &mut ChaCha8Rng) -> Point {
    let w = uniform(rng, &[BATCH, CLASSES], -1.0, 1.0);
    Point {
        x: uniform(rng, &[BATCH, CLASSES], -4.0, 4.0),
        f: Box::new(move |t, x| {
            let p = soft_predictions(t, x, 3.0)?;
            let w = t.constant(w.clone());
            let pw = t.mul(p, w)?;
            t.sum(pw)
        }),
    }
}

fn sample_cross_entropy(rng: &mut ChaCha8Rng) -> Point {
    let target = prob_rows(rng, BATCH, CLASSES);
    Point {
        x: prob_rows(rng, BATCH, CLASSES),
        f: Box::new(move |t, x| {
            let y = t.constant(target.clone());
            cross_entropy(t, x, y)
        }),
    }
}

fn sample_softmax_loss(rng: &mut ChaCha8Rng) -> Point {
    let y = labels(rng, BATCH, CLASSES);
    Point {
        x: uniform(rng, &[BATCH, CLASSES], -4.0, 4.0),
        f: Box::new(move |t, x| softmax_loss(t, x, &y)),
    }
}

fn sample_soft_target(rng: &mut ChaCha8Rng) -> Point {
    let teacher = TeacherValues::random(rng);
    Point {
        x: uniform(rng, &[BATCH, CLASSES], -4.0, 4.0),
        f: Box::new(move |t, x| {
            let tl = t.constant(teacher.logits.clone());
            soft_target_loss(t, x, tl, 3.0)
        }),
    }
}

fn sample_distill_cls(rng: &mut ChaCha8Rng) -> Point {
    let teacher = TeacherValues::random(rng);
    let y = labels(rng, BATCH, CLASSES);
    Point {
        x: uniform(rng, &[BATCH, CLASSES], -4.0, 4.0),
        f: Box::new(move |t, x| {
            let tl = t.constant(teacher.logits.clone());
            distill_cls_loss(t, x, tl, &y, &cfg(0.7, 0.0))
        }),
    }
}

fn sample_distill_cls_targets(rng: &mut ChaCha8Rng) -> Point {
    let heads = Heads::random(rng);
    let teacher = TeacherValues::random(rng);
    let y = labels(rng, BATCH, CLASSES);
    Point {
        x: uniform(rng, &[BATCH, FEATURES], -2.0, 2.0),
        f: Box::new(move |t, x| {
            let s = heads.apply(t, x)?;
            let te = teacher_outputs(t, &teacher);
            let by_logits = distill_cls_loss_with(t, s.logits, te.logits, None, &y, &cfg(0.5, 0.0), ClsTarget::Logits)?;
            let by_hidden = distill_cls_loss_with(
                t,
                s.logits,
                te.logits,
                Some((s.embedding, te.embedding)),
                &y,
                &cfg(0.8, 0.0),
                ClsTarget::Hidden,
            )?;
            t.add(by_logits, by_hidden)
        }),
    }
}

fn sample_euclidean(rng: &mut ChaCha8Rng) -> Point {
    let y = uniform(rng, &[BATCH, COORDS], -1.0, 1.0);
    Point {
        x: uniform(rng, &[BATCH, COORDS], -1.0, 1.0),
        f: Box::new(move |t, x| {
            let y = t.constant(y.clone());
            euclidean_loss(t, x, y)
        }),
    }
}

fn sample_hidden_match(rng: &mut ChaCha8Rng) -> Point {
    let k = uniform(rng, &[BATCH, EMBED], -2.0, 2.0);
    Point {
        x: uniform(rng, &[BATCH, EMBED], -2.0, 2.0),
        f: Box::new(move |t, x| {
            let k = t.constant(k.clone());
            hidden_match_loss(t, x, k)
        }),
    }
}

fn sample_general(rng: &mut ChaCha8Rng) -> Point {
    let heads = Heads::random(rng);
    let teacher = TeacherValues::random(rng);
    let y = labels(rng, BATCH, CLASSES);
    Point {
        x: uniform(rng, &[BATCH, FEATURES], -2.0, 2.0),
        f: Box::new(move |t, x| {
            let s = heads.apply(t, x)?;
            let te = teacher_outputs(t, &teacher);
            let task = softmax_loss(t, s.logits, &y)?;
            let soft = soft_target_loss(t, s.logits, te.logits, 3.0)?;
            let hidden = hidden_match_loss(t, s.embedding, te.embedding)?;
            general_distill_loss(t, task, Some(soft), Some(hidden), &cfg(0.6, 1.3))
        }),
    }
}

fn sample_align(rng: &mut ChaCha8Rng) -> Point {
    let heads = Heads::random(rng);
    let teacher = TeacherValues::random(rng);
    let y = uniform(rng, &[BATCH, COORDS], -1.0, 1.0);
    Point {
        x: uniform(rng, &[BATCH, FEATURES], -2.0, 2.0),
        f: Box::new(move |t, x| {
            let s = heads.apply(t, x)?;
            let te = teacher_outputs(t, &teacher);
            let y = t.constant(y.clone());
            align_distill_loss(t, &s, &te, y, &cfg(0.5, 0.3))
        }),
    }
}

fn sample_triplet(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let x = uniform(rng, &[BATCH, EMBED], -1.0, 1.0);
        let rows = random_triplets(rng, BATCH, 8);
        if hinge_clearance(&x, &rows, 0.4) < KINK_GAP {
            continue;
        }
        return Point {
            x,
            f: Box::new(move |t, x| {
                let a = t.gather_rows(x, &rows.anchor)?;
                let p = t.gather_rows(x, &rows.positive)?;
                let n = t.gather_rows(x, &rows.negative)?;
                triplet_loss(t, a, p, n, 0.4)
            }),
        };
    }
}

fn sample_verif(rng: &mut ChaCha8Rng, joint: bool) -> Point {
    loop {
        let heads = Heads::random(rng);
        let teacher = TeacherValues::random(rng);
        let y = labels(rng, BATCH, CLASSES);
        let x = uniform(rng, &[BATCH, FEATURES], -2.0, 2.0);
        let rows = random_triplets(rng, BATCH, 8);
        if hinge_clearance(&x.matmul(&heads.embedding).unwrap(), &rows, 0.4) < KINK_GAP {
            continue;
        }
        return Point {
            x,
            f: Box::new(move |t, x| {
                let s = heads.apply(t, x)?;
                let te = teacher_outputs(t, &teacher);
                verif_distill_loss(t, &s, &te, &rows, &cfg(0.5, 0.7), joint, Some(&y))
            }),
        };
    }
}

fn sample_verif_plain(rng: &mut ChaCha8Rng) -> Point {
    sample_verif(rng, false)
}

fn sample_verif_joint(rng: &mut ChaCha8Rng) -> Point {
    sample_verif(rng, true)
}

const LOSS_CASES: &[(&str, Sampler)] = &[
    ("soft_predictions", sample_soft_predictions),
    ("cross_entropy", sample_cross_entropy),
    ("softmax_loss", sample_softmax_loss),
    ("soft_target_loss", sample_soft_target),
    ("distill_cls_loss", sample_distill_cls),
    ("distill_cls_loss_with(logits, hidden)", sample_distill_cls_targets),
    ("euclidean_loss", sample_euclidean),
    ("hidden_match_loss", sample_hidden_match),
    ("general_distill_loss", sample_general),
    ("align_distill_loss", sample_align),
    ("triplet_loss", sample_triplet),
    ("verif_distill_loss", sample_verif_plain),
    ("verif_distill_loss(joint softmax)", sample_verif_joint),
];

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub name: &'static str,
    pub points: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

/// Finite-difference checks of every loss op at `points` random inputs.
pub fn gradient_suite(points: usize, seed: u64) -> Vec<LossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LOSS_CASES
        .iter()
        .map(|&(name, sample)| {
            let mut check = LossCheck {
                name,
                points,
                failures: 0,
                max_rel_error: 0.0,
            };
            for _ in 0..points {
                let p = sample(&mut rng);
                let report = grad_check(&p.f, &p.x, GRAD_STEP, GRAD_TOL).expect("finite losses");
                check.failures += usize::from(!report.passed);
                check.max_rel_error = check.max_rel_error.max(report.max_rel_error);
            }
            check
        })
        .collect()
}

/// `(name, lhs, rhs)` pairs that must agree exactly.
pub fn reduction_identities(seed: u64) -> Vec<(&'static str, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = Heads::random(&mut rng);
    let teacher = TeacherValues::random(&mut rng);
    let y = labels(&mut rng, BATCH, CLASSES);
    let kp = uniform(&mut rng, &[BATCH, COORDS], -1.0, 1.0);
    let x0 = uniform(&mut rng, &[BATCH, FEATURES], -2.0, 2.0);
    let rows = random_triplets(&mut rng, BATCH, 10);
    let logits = uniform(&mut rng, &[BATCH, CLASSES], -5.0, 5.0);

    let value_and_grad = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor| -> Vec<f64> {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let out = f(&mut t, v).unwrap();
        let mut r = vec![t.value(out).item().unwrap()];
        t.backward(out).unwrap();
        r.extend_from_slice(t.grad(v).unwrap());
        r
    };
    let softmax_of = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Vec<f64> {
        let mut t = Tape::new();
        let v = t.constant(logits.clone());
        let out = f(&mut t, v).unwrap();
        t.value(out).data().to_vec()
    };

    vec![
        (
            "distill_cls_loss(alpha=0) = softmax_loss",
            value_and_grad(
                &|t, x| {
                    let tl = t.constant(teacher.logits.clone());
                    distill_cls_loss(t, x, tl, &y, &cfg(0.0, 0.0))
                },
                &logits,
            ),
            value_and_grad(&|t, x| softmax_loss(t, x, &y), &logits),
        ),
        (
            "align_distill_loss(0,0) = euclidean_loss",
            value_and_grad(
                &|t, x| {
                    let s = heads.apply(t, x)?;
                    let te = teacher_outputs(t, &teacher);
                    let k = t.constant(kp.clone());
                    align_distill_loss(t, &s, &te, k, &cfg(0.0, 0.0))
                },
                &x0,
            ),
            value_and_grad(
                &|t, x| {
                    let s = heads.apply(t, x)?;
                    let k = t.constant(kp.clone());
                    euclidean_loss(t, s.regression.unwrap(), k)
                },
                &x0,
            ),
        ),
        (
            "verif_distill_loss(0,0, no softmax) = triplet_loss",
            value_and_grad(
                &|t, x| {
                    let s = heads.apply(t, x)?;
                    let te = teacher_outputs(t, &teacher);
                    verif_distill_loss(t, &s, &te, &rows, &cfg(0.0, 0.0), false, None)
                },
                &x0,
            ),
            value_and_grad(
                &|t, x| {
                    let s = heads.apply(t, x)?;
                    let a = t.gather_rows(s.embedding, &rows.anchor)?;
                    let p = t.gather_rows(s.embedding, &rows.positive)?;
                    let n = t.gather_rows(s.embedding, &rows.negative)?;
                    triplet_loss(t, a, p, n, 0.4)
                },
                &x0,
            ),
        ),
        (
            "soft_predictions(tau=1) = softmax_rows",
            softmax_of(&|t, x| soft_predictions(t, x, 1.0)),
            softmax_of(&|t, x| t.softmax_rows(x)),
        ),
    ]
}

/// Nearest-other-sample identity agreement by exhaustive search.
pub fn brute_verification_top1(emb: &Tensor, ids: &[usize]) -> f64 {
    let n = ids.len();
    let dist = |i: usize, j: usize| -> f64 {
        emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j != i && dist(i, j) < best_d {
                best_d = dist(i, j);
                best = j;
            }
        }
        hits += usize::from(ids[best] == ids[i]);
    }
    hits as f64 / n as f64
}

/// Best accuracy over every candidate threshold: each observed distance,
/// each midpoint between observed distances, and both extremes.
pub fn brute_threshold_accuracy(same: &[f64], diff: &[f64]) -> f64 {
    let all: Vec<f64> = same.iter().chain(diff).copied().collect();
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &a in &all {
        candidates.push(a);
        for &b in &all {
            candidates.push(0.5 * (a + b));
        }
    }
    let total = all.len() as f64;
    candidates
        .iter()
        .map(|&thr| {
            let correct = same.iter().filter(|&&d| d <= thr).count() + diff.iter().filter(|&&d| d > thr).count();
            correct as f64 / total
        })
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
