//! Training objective: per-step estimate losses, step-over-step margin losses,
//! their weighted sum (the constraint loss), and the final prediction loss.
//!
//! All losses are sums over utterances. Cross-entropy terms are negative
//! log-likelihoods of the gold class, with probabilities clamped at
//! [`PROB_FLOOR`] before the log.

use std::fmt;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

fn check_gold(tape: &Tape, p: Var, gold: &[usize]) -> Result<()> {
    let t = tape.value(p);
    if t.rank() != 2 || t.rows() != gold.len() {
        return Err(Error::Shape {
            op: "loss",
            lhs: t.shape().to_vec(),
            rhs: vec![gold.len()],
        });
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= t.cols()) {
        return Err(Error::OutOfRange {
            what: "gold label",
            index: g,
            size: t.cols(),
        });
    }
    Ok(())
}

/// `−Σ_i log P[i, gold_i]`.
pub fn estimate_loss(tape: &mut Tape, p: Var, gold: &[usize]) -> Result<Var> {
    check_gold(tape, p, gold)?;
    let picked = tape.pick(p, gold)?;
    let clamped = tape
        .value(picked)
        .data()
        .iter()
        .filter(|&&v| v < PROB_FLOOR)
        .count();
    if clamped > 0 {
        log::debug!("clamped {clamped} gold probabilities below {PROB_FLOOR:e}");
    }
    let logp = tape.log_clamped(picked, PROB_FLOOR)?;
    let s = tape.sum(logp)?;
    tape.scale(s, -1.0)
}

/// Same formula as [`estimate_loss`], applied to the final step.
pub fn prediction_loss(tape: &mut Tape, p_final: Var, gold: &[usize]) -> Result<Var> {
    estimate_loss(tape, p_final, gold)
}

/// `Σ_i max(0, P_prev[i, gold_i] − P_t[i, gold_i])`.
pub fn margin_loss(tape: &mut Tape, p_t: Var, p_prev: Var, gold: &[usize]) -> Result<Var> {
    check_gold(tape, p_t, gold)?;
    check_gold(tape, p_prev, gold)?;
    let cur = tape.pick(p_t, gold)?;
    let prev = tape.pick(p_prev, gold)?;
    let drop = tape.sub(prev, cur)?;
    let hinge = tape.relu(drop)?;
    tape.sum(hinge)
}

/// Loss terms of one task, as tape variables.
#[derive(Clone, Debug)]
pub struct TaskLossVars {
    /// steps `0..T`
    pub estimate: Vec<Var>,
    /// steps `1..=T`
    pub margin: Vec<Var>,
    pub constraint: Var,
    pub prediction: Var,
    pub total: Var,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `Σ_{t<T} estimate(P_t) + γ·Σ_{t=1..T} margin(P_t, P_{t−1})` over the
/// per-step distributions `dists[0..=T]`. Returns the individual terms too.
pub fn constraint_loss(
    tape: &mut Tape,
    dists: &[Var],
    gold: &[usize],
    gamma: f64,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    if dists.is_empty() {
        return Err(Error::Empty {
            op: "constraint_loss",
        });
    }
    let t_final = dists.len() - 1;
    let mut estimate = Vec::with_capacity(t_final);
    let mut margin = Vec::with_capacity(t_final);
    for &p in &dists[..t_final] {
        estimate.push(estimate_loss(tape, p, gold)?);
    }
    for t in 1..=t_final {
        margin.push(margin_loss(tape, dists[t], dists[t - 1], gold)?);
    }
    if t_final == 0 {
        return Ok((zero(tape), estimate, margin));
    }
    let mut est_sum = estimate[0];
    for &e in &estimate[1..] {
        est_sum = tape.add(est_sum, e)?;
    }
    let mut margin_sum = margin[0];
    for &m in &margin[1..] {
        margin_sum = tape.add(margin_sum, m)?;
    }
    let weighted = tape.scale(margin_sum, gamma)?;
    let c = tape.add(est_sum, weighted)?;
    Ok((c, estimate, margin))
}

fn task_loss(
    tape: &mut Tape,
    dists: &[Var],
    gold: &[usize],
    gamma: f64,
    use_constraint: bool,
) -> Result<TaskLossVars> {
    let last = *dists.last().ok_or(Error::Empty { op: "task_loss" })?;
    let prediction = prediction_loss(tape, last, gold)?;
    let (constraint, estimate, margin) = if use_constraint {
        constraint_loss(tape, dists, gold, gamma)?
    } else {
        (zero(tape), Vec::new(), Vec::new())
    };
    let total = tape.add(prediction, constraint)?;
    Ok(TaskLossVars {
        estimate,
        margin,
        constraint,
        prediction,
        total,
    })
}

#[derive(Clone, Debug)]
pub struct LossVars {
    pub sentiment: TaskLossVars,
    pub act: TaskLossVars,
    pub grand: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let task = |v: &TaskLossVars| TaskLossReport {
            estimate: v.estimate.iter().map(|&x| tape.value(x).item()).collect(),
            margin: v.margin.iter().map(|&x| tape.value(x).item()).collect(),
            constraint: tape.value(v.constraint).item(),
            prediction: tape.value(v.prediction).item(),
            total: tape.value(v.total).item(),
        };
        LossReport {
            sentiment: task(&self.sentiment),
            act: task(&self.act),
            grand: tape.value(self.grand).item(),
        }
    }
}

/// Both tasks' losses and their sum, from per-step distributions
/// `P_S^0..=P_S^T` and `P_A^0..=P_A^T`. With `use_constraint` off only the
/// prediction losses remain.
pub fn total_loss(
    tape: &mut Tape,
    dists_s: &[Var],
    dists_a: &[Var],
    gold_s: &[usize],
    gold_a: &[usize],
    gamma: f64,
    use_constraint: bool,
) -> Result<LossVars> {
    if dists_s.len() != dists_a.len() {
        return Err(Error::Shape {
            op: "total_loss",
            lhs: vec![dists_s.len()],
            rhs: vec![dists_a.len()],
        });
    }
    let sentiment = task_loss(tape, dists_s, gold_s, gamma, use_constraint)?;
    let act = task_loss(tape, dists_a, gold_a, gamma, use_constraint)?;
    let grand = tape.add(sentiment.total, act.total)?;
    Ok(LossVars {
        sentiment,
        act,
        grand,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLossReport {
    pub estimate: Vec<f64>,
    pub margin: Vec<f64>,
    pub constraint: f64,
    pub prediction: f64,
    pub total: f64,
}

impl TaskLossReport {
    pub fn estimate_sum(&self) -> f64 {
        self.estimate.iter().sum()
    }

    pub fn margin_sum(&self) -> f64 {
        self.margin.iter().sum()
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        fn merge(a: &mut Vec<f64>, b: &[f64], scale: f64) {
            if a.len() < b.len() {
                a.resize(b.len(), 0.0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        merge(&mut self.estimate, &other.estimate, scale);
        merge(&mut self.margin, &other.margin, scale);
        self.constraint += scale * other.constraint;
        self.prediction += scale * other.prediction;
        self.total += scale * other.total;
    }
}

/// Numeric values of every loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub sentiment: TaskLossReport,
    pub act: TaskLossReport,
    pub grand: f64,
}

impl LossReport {
    /// `self += scale * other`, term by term.
    pub fn add_scaled(&mut self, other: &LossReport, scale: f64) {
        self.sentiment.add_scaled(&other.sentiment, scale);
        self.act.add_scaled(&other.act, scale);
        self.grand += scale * other.grand;
    }

    /// One `key=value` line per reasoning step, then a summary line.
    pub fn lines(&self) -> Vec<String> {
        let steps = self
            .sentiment
            .estimate
            .len()
            .max(self.sentiment.margin.len() + 1);
        let mut out = Vec::with_capacity(steps + 1);
        for t in 0..steps {
            let mut line = format!("step={t}");
            for (tag, r) in [("S", &self.sentiment), ("A", &self.act)] {
                if let Some(e) = r.estimate.get(t) {
                    line.push_str(&format!(" estimate_{tag}={e}"));
                }
                if let Some(m) = t.checked_sub(1).and_then(|k| r.margin.get(k)) {
                    line.push_str(&format!(" margin_{tag}={m}"));
                }
            }
            if line.contains(' ') {
                out.push(line);
            }
        }
        out.push(self.to_string());
        out
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} pred_S={} constraint_S={} total_S={} pred_A={} constraint_A={} total_A={}",
            self.grand,
            self.sentiment.prediction,
            self.sentiment.constraint,
            self.sentiment.total,
            self.act.prediction,
            self.act.constraint,
            self.act.total
        )
    }
}
