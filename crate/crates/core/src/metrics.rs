//! Per-round evaluation statistics and the empirical convergence-bound check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::numfmt::sig17;
use crate::seed::rng_from;

pub const METRICS_HEADER: &str = "round,avg_acc,var_acc,avg_loss,avg_sq_grad_norm,lambda";

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed rounds (1-based).
    pub round: usize,
    pub avg_acc: f64,
    pub var_acc: f64,
    /// Mean test loss of the evaluated models.
    pub avg_loss: f64,
    /// Mean squared norm of the stochastic gradients taken this round.
    pub avg_sq_grad_norm: f64,
    /// Learning rate used during the round.
    pub lambda: f64,
}

/// Mean and population variance of per-node accuracies (one pass, Welford).
pub fn accuracy_stats(per_node_acc: &[f64]) -> Result<(f64, f64)> {
    if per_node_acc.is_empty() {
        return Err(Error::Empty("accuracy statistics over zero nodes".into()));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in per_node_acc.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((mean, (m2 / per_node_acc.len() as f64).max(0.0)))
}

pub fn write_metrics(records: &[MetricsRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            sig17(r.avg_acc),
            sig17(r.var_acc),
            sig17(r.avg_loss),
            sig17(r.avg_sq_grad_norm),
            sig17(r.lambda)
        )?;
    }
    Ok(())
}

pub fn write_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_metrics(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(Error::InvalidArgument(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::InvalidArgument(format!("malformed metrics line {}: {line}", k + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRecord {
                round: f[0].parse().map_err(|_| bad())?,
                avg_acc: num(f[1])?,
                var_acc: num(f[2])?,
                avg_loss: num(f[3])?,
                avg_sq_grad_norm: num(f[4])?,
                lambda: num(f[5])?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

// ---------------------------------------------------------------------------
// Convergence bound

/// Quantities entering the bound
/// `(1/T) sum ||grad f(avg^t)||^2 <= C0 + C1`, with
/// `C0 = 2 (f(avg^0) - f*) / (lr T)` and `C1 = G^2 + theta^2/lr^2 + L theta^2/lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    pub lr: f64,
    pub rounds: usize,
    /// Largest squared stochastic-gradient norm seen.
    pub g_sq: f64,
    /// Largest squared per-round model change seen.
    pub theta_sq: f64,
    pub smoothness: f64,
    pub initial_loss: f64,
    pub loss_lower_bound: f64,
}

impl BoundInputs {
    /// Bound on the spread of first-order differences, `2 theta`.
    pub fn kappa(&self) -> f64 {
        2.0 * self.theta_sq.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTerms {
    pub c0: f64,
    pub c1: f64,
    pub bound: f64,
}

pub fn convergence_bound(inp: &BoundInputs) -> Result<BoundTerms> {
    if inp.lr.is_nan() || inp.lr <= 0.0 || inp.rounds == 0 {
        return Err(Error::InvalidArgument(format!(
            "bound needs lr > 0 and T >= 1 (got {}, {})",
            inp.lr, inp.rounds
        )));
    }
    let (lr, t) = (inp.lr, inp.rounds as f64);
    let c0 = 2.0 / (lr * t) * (inp.initial_loss - inp.loss_lower_bound);
    let c1 = inp.g_sq + inp.theta_sq / (lr * lr) + inp.smoothness * inp.theta_sq / lr;
    Ok(BoundTerms { c0, c1, bound: c0 + c1 })
}

/// What a training run records for the bound check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    /// Learning rate of each completed round.
    pub lr_schedule: Vec<f64>,
    pub max_sq_grad_norm: f64,
    pub max_sq_model_step: f64,
    /// Node-average model at the start of each round, plus the final one.
    pub avg_models: Vec<ParamVector>,
    /// Full-training-set gradient at each entry of `avg_models`.
    pub full_grads: Vec<ParamVector>,
    /// Full-training-set loss at each entry of `avg_models`.
    pub full_losses: Vec<f64>,
}

impl RunTrace {
    pub fn rounds(&self) -> usize {
        self.lr_schedule.len()
    }

    pub fn has_full_gradients(&self) -> bool {
        !self.full_grads.is_empty() && self.full_grads.len() == self.avg_models.len()
    }

    /// `(1/T) sum_{t<T} ||grad f(avg^t)||^2`.
    pub fn mean_sq_full_grad(&self) -> Result<f64> {
        let t = self.rounds();
        if !self.has_full_gradients() || self.full_grads.len() < t {
            return Err(Error::InvalidArgument("trace carries no full-gradient pass".into()));
        }
        Ok(self.full_grads[..t].iter().map(ParamVector::norm_sq).sum::<f64>() / t as f64)
    }
}

/// Minimum number of trajectory pairs used for the smoothness estimate.
pub const SMOOTHNESS_PAIRS: usize = 200;
pub const SMOOTHNESS_SAFETY: f64 = 2.0;

/// Largest `||g_a - g_b|| / ||w_a - w_b||` over sampled pairs of the
/// average-model trajectory. All pairs are used when there are few of them.
pub fn estimate_smoothness(models: &[ParamVector], grads: &[ParamVector], pairs: usize, seed: u64) -> f64 {
    let n = models.len().min(grads.len());
    let ratio = |a: usize, b: usize| -> Option<f64> {
        let dw = models[a].sub(&models[b]).ok()?.norm_sq().sqrt();
        if dw == 0.0 {
            return None;
        }
        Some(grads[a].sub(&grads[b]).ok()?.norm_sq().sqrt() / dw)
    };
    let total = n * n.saturating_sub(1) / 2;
    let mut best: f64 = 0.0;
    if total <= pairs {
        for a in 0..n {
            for b in a + 1..n {
                best = ratio(a, b).map_or(best, |r| best.max(r));
            }
        }
    } else {
        let mut rng = rng_from(seed);
        let mut drawn = 0;
        while drawn < pairs {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                continue;
            }
            drawn += 1;
            best = ratio(a, b).map_or(best, |r| best.max(r));
        }
    }
    best
}

/// Empirical stand-ins for the bound's constants.
///
/// The learning rate is the mean of the per-round rates, which makes `C0`
/// the exact telescoped form under a decaying schedule.
pub fn measure_constants(trace: &RunTrace, seed: u64) -> Result<BoundInputs> {
    if trace.rounds() < 2 {
        return Err(Error::InvalidArgument(format!(
            "trace too short: {} rounds (need at least 2)",
            trace.rounds()
        )));
    }
    if !trace.has_full_gradients() {
        return Err(Error::InvalidArgument("trace carries no full-gradient pass".into()));
    }
    let lr = trace.lr_schedule.iter().sum::<f64>() / trace.rounds() as f64;
    let l = estimate_smoothness(&trace.avg_models, &trace.full_grads, SMOOTHNESS_PAIRS, seed);
    Ok(BoundInputs {
        lr,
        rounds: trace.rounds(),
        g_sq: trace.max_sq_grad_norm,
        theta_sq: trace.max_sq_model_step,
        smoothness: if l > 0.0 { SMOOTHNESS_SAFETY * l } else { f64::MIN_POSITIVE },
        initial_loss: trace.full_losses[0],
        loss_lower_bound: 0.0,
    })
}

/// Measured left side against the bound built from measured constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub measured: f64,
    pub inputs: BoundInputs,
    pub terms: BoundTerms,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.measured <= self.terms.bound
    }
}

pub fn check_bound(trace: &RunTrace, seed: u64) -> Result<BoundCheck> {
    let inputs = measure_constants(trace, seed)?;
    Ok(BoundCheck {
        measured: trace.mean_sq_full_grad()?,
        inputs,
        terms: convergence_bound(&inputs)?,
    })
}
