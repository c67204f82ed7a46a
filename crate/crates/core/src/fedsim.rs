//! Round-based simulation of DACFL and the CDSGD, D-PSGD and FedAvg
//! baselines over a topology schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{Algorithm, DataSource, ExperimentConfig, StepsMode};
use crate::consensus::{fodac_step, ConsensusState};
use crate::data::{
    gen_synthetic_split, load_idx_raw, partition_iid, partition_noniid, sample_batch_indices, Dataset, Partition,
    PartitionMode, Standardizer, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::matrix::{schedule_matrix, TopologySchedule};
use crate::metrics::{accuracy_stats, check_bound, write_csv, BoundCheck, MetricsRecord, RunTrace};
use crate::model::{evaluate, init_params, loss_and_grad, sgd_in_place, Evaluation, ModelShape, ParamVector};
use crate::numfmt::sig17;
use crate::seed::{derive, rng_from, stream_rng, SimRng, Stream};

/// Everything a run reads but never mutates.
#[derive(Clone, Debug)]
pub struct Environment {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub schedule: TopologySchedule,
    pub shape: ModelShape,
    /// Union of all node shards; the full objective for the bound check.
    pub objective: Dataset,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_data(cfg)?;
        let partition = match cfg.partition {
            PartitionMode::Iid => partition_iid(&train, cfg.nodes, cfg.seed)?,
            PartitionMode::NonIid => partition_noniid(&train, cfg.nodes, cfg.shards_per_node, cfg.seed)?,
        };
        Self::from_parts(cfg, train, test, partition)
    }

    pub fn from_parts(cfg: &ExperimentConfig, train: Dataset, test: Dataset, partition: Partition) -> Result<Self> {
        if partition.nodes() != cfg.nodes {
            return Err(Error::shape(format!("{} nodes", cfg.nodes), format!("{} partitions", partition.nodes())));
        }
        if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
            return Err(Error::shape(
                format!("test set {}x{}", train.dim(), train.num_classes()),
                format!("{}x{}", test.dim(), test.num_classes()),
            ));
        }
        let schedule = TopologySchedule::new(cfg.nodes, cfg.topology_kind(), cfg.schedule_mode(), cfg.seed)?;
        let shape = ModelShape::new(train.dim(), cfg.hidden_dim, train.num_classes())?;
        let objective = train.subset(&partition.union());
        Ok(Self {
            train,
            test,
            partition,
            schedule,
            shape,
            objective,
        })
    }
}

/// Training and test sets for `cfg`. IDX data keeps a seeded seventh of the
/// samples as the test set and is standardized with training statistics.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                classes: cfg.classes,
                dim: cfg.dim,
                per_class: cfg.per_class,
                spread: cfg.spread,
                seed: cfg.seed,
            };
            gen_synthetic_split(spec, cfg.test_per_class)
        }
        DataSource::Idx => {
            let (images, labels) = match (&cfg.images, &cfg.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(Error::Config("data=idx needs both images and labels paths".into())),
            };
            let raw = load_idx_raw(images, labels)?;
            let raw = if raw.num_classes() < cfg.classes {
                raw.with_num_classes(cfg.classes)?
            } else {
                raw
            };
            if raw.len() < 7 {
                return Err(Error::TooFewSamples(format!("{} IDX samples cannot be split into train/test", raw.len())));
            }
            let mut order: Vec<usize> = (0..raw.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, Stream::Holdout, 0));
            let (test_idx, train_idx) = order.split_at(raw.len() / 7);
            let (train, test) = (raw.subset(train_idx), raw.subset(test_idx));
            let scaler = Standardizer::fit(&train)?;
            Ok((scaler.apply(&train)?, scaler.apply(&test)?))
        }
    }
}

/// Mutable simulation state at a round boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    /// Rounds completed.
    pub round: usize,
    /// `omega_i^t`; all equal to the global model under FedAvg.
    pub models: Vec<ParamVector>,
    /// `omega_i^{t-1}`.
    pub previous: Vec<ParamVector>,
    /// DACFL estimates `x_i^t`.
    pub consensus: Option<ConsensusState>,
    pub rngs: Vec<SimRng>,
}

/// What one round produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub record: MetricsRecord,
    pub grad_evals: usize,
    pub max_sq_grad_norm: f64,
    pub max_sq_model_step: f64,
    pub evaluations: Vec<Evaluation>,
}

struct LocalOutcome {
    model: ParamVector,
    sq_norms: Vec<f64>,
}

pub struct Simulation<'a> {
    cfg: ExperimentConfig,
    env: &'a Environment,
    state: SimState,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &ExperimentConfig, env: &'a Environment) -> Result<Self> {
        cfg.validate()?;
        if env.partition.nodes() != cfg.nodes {
            return Err(Error::shape(format!("{} nodes", cfg.nodes), format!("{} partitions", env.partition.nodes())));
        }
        let init = init_params(env.shape, derive(cfg.seed, Stream::Init, 0));
        let models = vec![init; cfg.nodes];
        let consensus = match cfg.algorithm {
            Algorithm::Dacfl => Some(ConsensusState::new(models.clone())?),
            _ => None,
        };
        let rngs = (0..cfg.nodes)
            .map(|i| rng_from(derive(cfg.seed, Stream::Batches, i as u64)))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            env,
            state: SimState {
                round: 0,
                previous: models.clone(),
                models,
                consensus,
                rngs,
            },
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn checkpoint(&self) -> SimState {
        self.state.clone()
    }

    pub fn restore(&mut self, state: SimState) -> Result<()> {
        if state.models.len() != self.cfg.nodes || state.rngs.len() != self.cfg.nodes {
            return Err(Error::shape(format!("{} nodes", self.cfg.nodes), format!("{} models", state.models.len())));
        }
        self.state = state;
        Ok(())
    }

    /// Gradient evaluations each node performs per round.
    pub fn steps_per_round(&self) -> usize {
        match self.cfg.steps_mode {
            StepsMode::SingleBatch => 1,
            StepsMode::FullEpoch => self.cfg.local_epochs * (self.env.partition.per_node() / self.cfg.batch_size),
        }
    }

    /// The models scored each round: DACFL estimates, CDSGD node models, or
    /// the single global model for D-PSGD and FedAvg.
    pub fn output_models(&self) -> Result<Vec<ParamVector>> {
        Ok(match self.cfg.algorithm {
            Algorithm::Dacfl => self
                .state
                .consensus
                .as_ref()
                .expect("dacfl carries consensus state")
                .estimates()
                .to_vec(),
            Algorithm::Cdsgd => self.state.models.clone(),
            Algorithm::Dpsgd => vec![ParamVector::mean(&self.state.models)?],
            Algorithm::Fedavg => vec![self.state.models[0].clone()],
        })
    }

    /// Node-average model `mean_i omega_i^t`.
    pub fn average_model(&self) -> Result<ParamVector> {
        ParamVector::mean(&self.state.models)
    }

    /// Run one round and score the resulting output models on the test set.
    pub fn step(&mut self) -> Result<RoundReport> {
        let t = self.state.round;
        let lr = self.cfg.lr_at(t);
        let n = self.cfg.nodes;
        let models = self.state.models.clone();
        let models = &models;

        let (new_models, outcomes, w) = match self.cfg.algorithm {
            Algorithm::Fedavg => {
                let outcomes = self.local_round(t, lr, |i| (&models[i], None))?;
                let global = ParamVector::mean(&outcomes.iter().map(|o| o.model.clone()).collect::<Vec<_>>())?;
                (vec![global; n], outcomes, None)
            }
            Algorithm::Dacfl => {
                let w = schedule_matrix(&self.env.schedule, t)?;
                let mixed = w.mix(models)?;
                let outcomes = self.local_round(t, lr, |i| (&mixed[i], None))?;
                (outcomes.iter().map(|o| o.model.clone()).collect(), outcomes, Some(w))
            }
            Algorithm::Cdsgd | Algorithm::Dpsgd => {
                let w = schedule_matrix(&self.env.schedule, t)?;
                let mixed = w.mix(models)?;
                let outcomes = self.local_round(t, lr, |i| (&models[i], Some(&mixed[i])))?;
                (outcomes.iter().map(|o| o.model.clone()).collect(), outcomes, Some(w))
            }
        };

        let consensus = match (&self.state.consensus, &w) {
            (Some(c), Some(w)) => Some(fodac_step(c, &new_models, w)?),
            _ => None,
        };

        let max_sq_model_step = new_models
            .iter()
            .zip(&self.state.models)
            .map(|(a, b)| a.sub(b).map(|d| d.norm_sq()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let sq_norms: Vec<f64> = outcomes.iter().flat_map(|o| o.sq_norms.iter().copied()).collect();
        let grad_evals = sq_norms.len();
        let max_sq_grad_norm = sq_norms.iter().copied().fold(0.0, f64::max);
        let avg_sq_grad_norm = sq_norms.iter().sum::<f64>() / grad_evals.max(1) as f64;

        let previous = std::mem::replace(&mut self.state.models, new_models);
        self.state.previous = previous;
        self.state.consensus = consensus;
        self.state.round = t + 1;

        let evaluations = self.evaluate_outputs()?;
        let accs: Vec<f64> = evaluations.iter().map(|e| e.accuracy).collect();
        let (avg_acc, var_acc) = accuracy_stats(&accs)?;
        let avg_loss = evaluations.iter().map(|e| e.loss).sum::<f64>() / evaluations.len() as f64;
        if !avg_loss.is_finite() {
            return Err(Error::Divergence { round: t + 1 });
        }
        Ok(RoundReport {
            record: MetricsRecord {
                round: t + 1,
                avg_acc,
                var_acc,
                avg_loss,
                avg_sq_grad_norm,
                lambda: lr,
            },
            grad_evals,
            max_sq_grad_norm,
            max_sq_model_step,
            evaluations,
        })
    }

    pub fn evaluate_outputs(&self) -> Result<Vec<Evaluation>> {
        self.output_models()?
            .par_iter()
            .map(|m| evaluate(m, &self.env.test))
            .collect()
    }

    /// Local SGD on every node. `start(i)` gives the point where gradients are
    /// taken and, for pre-mix algorithms, the mixed model the same steps are
    /// applied to.
    fn local_round<'m, F>(&mut self, t: usize, lr: f64, start: F) -> Result<Vec<LocalOutcome>>
    where
        F: Fn(usize) -> (&'m ParamVector, Option<&'m ParamVector>) + Sync,
    {
        let env = self.env;
        let cfg = &self.cfg;
        self.state
            .rngs
            .par_iter_mut()
            .enumerate()
            .map(|(i, rng)| {
                let (grad_at, carry) = start(i);
                local_sgd(cfg, env, i, grad_at.clone(), carry.cloned(), lr, rng)
                    .map_err(|e| match e {
                        Error::Divergence { .. } => Error::Divergence { round: t + 1 },
                        other => other,
                    })
            })
            .collect()
    }
}

fn local_sgd(
    cfg: &ExperimentConfig,
    env: &Environment,
    node: usize,
    mut z: ParamVector,
    mut carry: Option<ParamVector>,
    lr: f64,
    rng: &mut SimRng,
) -> Result<LocalOutcome> {
    let batches: Vec<Vec<usize>> = match cfg.steps_mode {
        StepsMode::SingleBatch => vec![sample_batch_indices(&env.partition, node, cfg.batch_size, rng)?],
        StepsMode::FullEpoch => {
            let list = env.partition.node(node);
            if list.len() < cfg.batch_size {
                return Err(Error::TooFewSamples(format!(
                    "batch size {} vs node {node} shard of {}",
                    cfg.batch_size,
                    list.len()
                )));
            }
            let mut out = Vec::new();
            for _ in 0..cfg.local_epochs {
                let mut order = list.to_vec();
                order.shuffle(rng);
                out.extend(order.chunks_exact(cfg.batch_size).map(<[usize]>::to_vec));
            }
            out
        }
    };
    let mut sq_norms = Vec::with_capacity(batches.len());
    for idx in &batches {
        let (loss, g) = loss_and_grad(&z, &env.train.subset(idx))?;
        if !loss.is_finite() {
            return Err(Error::Divergence { round: 0 });
        }
        sq_norms.push(g.norm_sq());
        sgd_in_place(&mut z, &g, lr);
        if let Some(y) = carry.as_mut() {
            sgd_in_place(y, &g, lr);
        }
    }
    Ok(LocalOutcome {
        model: carry.unwrap_or(z),
        sq_norms,
    })
}

/// Full history of a run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub algorithm: Algorithm,
    pub metrics: Vec<MetricsRecord>,
    pub grad_evals: Vec<usize>,
    pub final_models: Vec<ParamVector>,
    pub final_eval: Vec<Evaluation>,
    pub trace: RunTrace,
}

fn record_average(trace: &mut RunTrace, sim: &Simulation, env: &Environment) -> Result<()> {
    let avg = sim.average_model()?;
    let (loss, grad) = loss_and_grad(&avg, &env.objective)?;
    trace.avg_models.push(avg);
    trace.full_grads.push(grad);
    trace.full_losses.push(loss);
    Ok(())
}

/// Run `cfg.rounds` rounds of `algorithm` on a prepared environment.
pub fn run_algorithm(cfg: &ExperimentConfig, env: &Environment, algorithm: Algorithm) -> Result<RunOutput> {
    let cfg = ExperimentConfig { algorithm, ..cfg.clone() };
    let mut sim = Simulation::new(&cfg, env)?;
    let mut trace = RunTrace::default();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut grad_evals = Vec::with_capacity(cfg.rounds);
    let mut final_eval = Vec::new();
    for _ in 0..cfg.rounds {
        if cfg.bound_check {
            record_average(&mut trace, &sim, env)?;
        }
        let report = sim.step()?;
        trace.lr_schedule.push(report.record.lambda);
        trace.max_sq_grad_norm = trace.max_sq_grad_norm.max(report.max_sq_grad_norm);
        trace.max_sq_model_step = trace.max_sq_model_step.max(report.max_sq_model_step);
        metrics.push(report.record);
        grad_evals.push(report.grad_evals);
        final_eval = report.evaluations;
    }
    if cfg.bound_check {
        record_average(&mut trace, &sim, env)?;
    }
    Ok(RunOutput {
        algorithm,
        metrics,
        grad_evals,
        final_models: sim.output_models()?,
        final_eval,
        trace,
    })
}

pub fn run_dacfl(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput> {
    run_algorithm(cfg, env, Algorithm::Dacfl)
}

pub fn run_cdsgd(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput> {
    run_algorithm(cfg, env, Algorithm::Cdsgd)
}

pub fn run_dpsgd(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput> {
    run_algorithm(cfg, env, Algorithm::Dpsgd)
}

pub fn run_fedavg(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput> {
    run_algorithm(cfg, env, Algorithm::Fedavg)
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub output: RunOutput,
    pub bound: Option<BoundCheck>,
}

impl ExperimentResult {
    /// `model,accuracy,loss`; one row per scored model, `global` for the
    /// single-model algorithms.
    pub fn final_eval_csv(&self) -> String {
        let mut s = String::from("model,accuracy,loss\n");
        let single = matches!(self.output.algorithm, Algorithm::Dpsgd | Algorithm::Fedavg);
        for (i, e) in self.output.final_eval.iter().enumerate() {
            let name = if single { "global".to_string() } else { i.to_string() };
            writeln!(s, "{name},{},{}", sig17(e.accuracy), sig17(e.loss)).expect("write to String");
        }
        s
    }

    /// Writes `metrics.csv`, `final_eval.csv` and `resolved_config.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&self.output.metrics, &dir.join("metrics.csv"))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put("final_eval.csv", self.final_eval_csv())?;
        put("resolved_config.txt", self.config.to_text())
    }
}

/// Build data, partition and schedule from `cfg`, run its algorithm, and
/// evaluate the bound when `cfg.bound_check` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let env = Environment::build(cfg)?;
    let output = run_algorithm(cfg, &env, cfg.algorithm)?;
    let bound = if cfg.bound_check {
        Some(check_bound(&output.trace, derive(cfg.seed, Stream::Lipschitz, 0))?)
    } else {
        None
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        output,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            nodes: 4,
            rounds: 5,
            batch_size: 5,
            classes: 3,
            dim: 4,
            per_class: 20,
            test_per_class: 10,
            hidden_dim: 0,
            lr: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn shared_initialization() {
        let cfg = small();
        let env = Environment::build(&cfg).unwrap();
        for alg in Algorithm::ALL {
            let sim = Simulation::new(&ExperimentConfig { algorithm: *alg, ..cfg.clone() }, &env).unwrap();
            let m = &sim.state().models;
            assert!(m.iter().all(|x| x == &m[0]));
            assert_eq!(sim.state().previous, *m);
        }
    }

    #[test]
    fn fedavg_keeps_nodes_identical_and_var_zero() {
        let out = run_fedavg(&small(), &Environment::build(&small()).unwrap()).unwrap();
        assert!(out.metrics.iter().all(|r| r.var_acc == 0.0));
        assert_eq!(out.final_models.len(), 1);
    }

    #[test]
    fn budget_is_nodes_times_steps() {
        for mode in [StepsMode::SingleBatch, StepsMode::FullEpoch] {
            let cfg = ExperimentConfig { steps_mode: mode, local_epochs: 2, ..small() };
            let env = Environment::build(&cfg).unwrap();
            for alg in Algorithm::ALL {
                let sim = Simulation::new(&cfg, &env).unwrap();
                let per = sim.steps_per_round();
                let out = run_algorithm(&cfg, &env, *alg).unwrap();
                assert!(out.grad_evals.iter().all(|&g| g == cfg.nodes * per), "{alg} {mode}");
            }
        }
    }

    #[test]
    fn checkpoint_restore_replays_a_round() {
        let cfg = small();
        let env = Environment::build(&cfg).unwrap();
        let mut sim = Simulation::new(&cfg, &env).unwrap();
        sim.step().unwrap();
        let snap = sim.checkpoint();
        let a = sim.step().unwrap();
        let after = sim.checkpoint();
        sim.restore(snap).unwrap();
        let b = sim.step().unwrap();
        assert_eq!(a, b);
        assert_eq!(sim.checkpoint(), after);
    }

    #[test]
    fn divergence_names_the_round() {
        let cfg = ExperimentConfig { lr: 1e308, lr_decay: 1.0, ..small() };
        let env = Environment::build(&cfg).unwrap();
        let err = run_dacfl(&cfg, &env).unwrap_err();
        assert!(matches!(err, Error::Divergence { round } if round >= 1), "{err}");
    }

    #[test]
    fn bound_trace_has_one_extra_snapshot() {
        let cfg = ExperimentConfig { bound_check: true, ..small() };
        let env = Environment::build(&cfg).unwrap();
        let out = run_dacfl(&cfg, &env).unwrap();
        assert_eq!(out.trace.avg_models.len(), cfg.rounds + 1);
        assert!(out.trace.has_full_gradients());
    }
}
