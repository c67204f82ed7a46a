//! First-order dynamic average consensus.
//!
//! Every node keeps an estimate `x_i` of the network-wide average of
//! time-varying reference inputs `r_i(t)`. One synchronous step is
//!
//! ```text
//! x_i(t+1) = x_i(t) + sum_{j != i} w_ij (x_j(t) - x_i(t)) + (r_i(t) - r_i(t-1))
//! ```
//!
//! With `x(0) = r(0)` and a symmetric `W`, the node mean of the estimates
//! equals the node mean of the current references after every step.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{validate, MixingMatrix, TopologyKind};
use crate::model::ParamVector;
use crate::numfmt::sig17;

/// Estimates and the last reference seen by each node.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusState {
    estimates: Vec<ParamVector>,
    previous_reference: Vec<ParamVector>,
    round: usize,
}

impl ConsensusState {
    /// `x^0 = r^0` and `r^{-1} = r^0`, so the first difference is zero.
    pub fn new(initial_reference: Vec<ParamVector>) -> Result<Self> {
        check_shapes(&initial_reference)?;
        Ok(Self {
            estimates: initial_reference.clone(),
            previous_reference: initial_reference,
            round: 0,
        })
    }

    pub fn estimates(&self) -> &[ParamVector] {
        &self.estimates
    }

    pub fn previous_reference(&self) -> &[ParamVector] {
        &self.previous_reference
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn nodes(&self) -> usize {
        self.estimates.len()
    }
}

fn check_shapes(values: &[ParamVector]) -> Result<()> {
    let first = values
        .first()
        .ok_or_else(|| Error::Empty("consensus over zero nodes".into()))?;
    values[1..].iter().try_for_each(|v| first.ensure_same_shape(v))
}

pub(crate) fn require_valid(w: &MixingMatrix) -> Result<()> {
    let report = validate(w);
    if report.is_valid() {
        Ok(())
    } else {
        Err(Error::Topology(report.to_string()))
    }
}

/// One synchronous consensus step driven by the current references.
///
/// All round-`t` estimates are read before any round-`t+1` estimate is
/// produced. The previous references are replaced by `current`.
pub fn fodac_step(state: &ConsensusState, current: &[ParamVector], w: &MixingMatrix) -> Result<ConsensusState> {
    let n = state.nodes();
    if current.len() != n || w.n() != n {
        return Err(Error::shape(
            format!("{n} nodes"),
            format!("{} references, {}x{} matrix", current.len(), w.n(), w.n()),
        ));
    }
    for r in current {
        state.estimates[0].ensure_same_shape(r)?;
    }
    require_valid(w)?;

    let x = &state.estimates;
    let next: Vec<ParamVector> = (0..n)
        .map(|i| {
            // offset x_i - r_i^{prev} plus disagreement, added to r_i last:
            // zero offset and zero disagreement reproduce r_i bit for bit
            let mut out = x[i].clone();
            let xi = x[i].values();
            let vals = out.values_mut();
            for (o, p) in vals.iter_mut().zip(state.previous_reference[i].values()) {
                *o -= p;
            }
            for (j, &wij) in w.row(i).iter().enumerate() {
                if j == i || wij == 0.0 {
                    continue;
                }
                for ((o, xj), xi) in vals.iter_mut().zip(x[j].values()).zip(xi) {
                    *o += wij * (xj - xi);
                }
            }
            for (o, r) in vals.iter_mut().zip(current[i].values()) {
                *o += r;
            }
            out
        })
        .collect();

    Ok(ConsensusState {
        estimates: next,
        previous_reference: current.to_vec(),
        round: state.round + 1,
    })
}

/// Neighborhood weighted average `sum_j w_ij v_j` per node.
pub fn cdsgd_style_estimate(values: &[ParamVector], w: &MixingMatrix) -> Result<Vec<ParamVector>> {
    check_shapes(values)?;
    w.mix(values)
}

/// Exact network-wide mean.
pub fn dpsgd_style_estimate(values: &[ParamVector]) -> Result<ParamVector> {
    ParamVector::mean(values)
}

// ---------------------------------------------------------------------------
// Scalar tracking experiment

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalFamily {
    /// `sin t + (1/t)^i + t + i`: large spread between nodes.
    InputsI,
    /// `sin t + (1/t)^i + t`: small spread between nodes.
    InputsII,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarSignalSpec {
    pub family: SignalFamily,
    pub n: usize,
    pub horizon: usize,
}

impl ScalarSignalSpec {
    pub fn new(family: SignalFamily) -> Self {
        Self {
            family,
            n: 10,
            horizon: 20,
        }
    }

    /// Reference of node `i` (1-based) at time `t` (1-based).
    pub fn value(&self, i: usize, t: usize) -> f64 {
        let (i, t) = (i as f64, t as f64);
        let base = t.sin() + (1.0 / t).powf(i) + t;
        match self.family {
            SignalFamily::InputsI => base + i,
            SignalFamily::InputsII => base,
        }
    }

    pub fn references(&self, t: usize) -> Vec<ParamVector> {
        (1..=self.n).map(|i| ParamVector::scalar(self.value(i, t))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrackingMethod {
    Fodac,
    CdsgdStyle,
    DpsgdStyle,
}

impl TrackingMethod {
    pub const ALL: [TrackingMethod; 3] = [TrackingMethod::Fodac, TrackingMethod::CdsgdStyle, TrackingMethod::DpsgdStyle];
}

impl fmt::Display for TrackingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackingMethod::Fodac => "fodac",
            TrackingMethod::CdsgdStyle => "cdsgd",
            TrackingMethod::DpsgdStyle => "dpsgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingRow {
    pub method: TrackingMethod,
    /// 1-based node index.
    pub node: usize,
    /// 1-based time step.
    pub t: usize,
    pub estimate: f64,
    pub true_mean: f64,
    pub abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    pub matrix: MixingMatrix,
    pub rows: Vec<TrackingRow>,
}

impl TrackingResult {
    pub fn errors(&self, method: TrackingMethod, t: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.t == t)
            .map(|r| r.abs_err)
            .collect()
    }

    pub fn max_error(&self, method: TrackingMethod, t: usize) -> f64 {
        self.errors(method, t).into_iter().fold(0.0, f64::max)
    }

    pub fn max_error_overall(&self, method: TrackingMethod) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.abs_err)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "method,node,t,estimate,true_mean,abs_err")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.node,
                r.t,
                sig17(r.estimate),
                sig17(r.true_mean),
                sig17(r.abs_err)
            )?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Track the average of the scalar signals with all three estimators.
pub fn run_tracking_experiment(spec: ScalarSignalSpec, kind: TopologyKind, seed: u64) -> Result<TrackingResult> {
    if spec.horizon == 0 || spec.n == 0 {
        return Err(Error::InvalidArgument("tracking needs n >= 1 and horizon >= 1".into()));
    }
    let w = kind.build(spec.n, seed)?;
    run_tracking_with_matrix(spec, &w)
}

pub fn run_tracking_with_matrix(spec: ScalarSignalSpec, w: &MixingMatrix) -> Result<TrackingResult> {
    if w.n() != spec.n {
        return Err(Error::shape(format!("{} nodes", spec.n), format!("{}x{} matrix", w.n(), w.n())));
    }
    let mut rows = Vec::with_capacity(3 * spec.n * spec.horizon);
    let mut state = ConsensusState::new(spec.references(1))?;
    for t in 1..=spec.horizon {
        let refs = spec.references(t);
        if t > 1 {
            state = fodac_step(&state, &refs, w)?;
        }
        let true_mean = dpsgd_style_estimate(&refs)?.values()[0];
        let cdsgd = cdsgd_style_estimate(&refs, w)?;
        let dpsgd = dpsgd_style_estimate(&cdsgd)?.values()[0];

        let mut push = |method, node: usize, estimate: f64| {
            rows.push(TrackingRow {
                method,
                node: node + 1,
                t,
                estimate,
                true_mean,
                abs_err: (true_mean - estimate).abs(),
            })
        };
        for i in 0..spec.n {
            push(TrackingMethod::Fodac, i, state.estimates()[i].values()[0]);
        }
        for (i, c) in cdsgd.iter().enumerate() {
            push(TrackingMethod::CdsgdStyle, i, c.values()[0]);
        }
        for i in 0..spec.n {
            push(TrackingMethod::DpsgdStyle, i, dpsgd);
        }
    }
    Ok(TrackingResult { matrix: w.clone(), rows })
}
